use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use liconv::autodiff::{train_two_phase, EpochRecord};
use liconv::bench::{self, BenchGrid, Repetitions};
use liconv::data::io::{load_dataset, read_image, save_dataset, write_mask, SplitDataset};
use liconv::data::metrics::argmax_channels;
use liconv::data::{evaluate, gen_synthetic_contours, multiscale_eval, ConfusionMatrix, SegSample, IGNORE_INDEX};
use liconv::li::build_li_kernel;
use liconv::models::{checkpoint, count_flops, count_params, li_features, write_features, Segmenter, SegmenterConfig};
use liconv::verify::{
    depthwise_oracle_suite, dilated_conv_oracle_suite, li_conv_oracle_suite, li_layer_oracle_suite, run_all,
    VerifyOptions, ORACLE_TOL,
};
use liconv::{Error, LIKernelSpec, Shape4, Tensor4};
use liconv::Result;

use crate::config::{RunConfig, SyntheticSpec};

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Config(format!("cannot write {}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn synthetic(spec: &SyntheticSpec) -> Result<SplitDataset> {
    let mut train = gen_synthetic_contours(spec.seed, spec.train + spec.val, spec.classes, spec.size)?;
    let val = train.split_off(spec.train);
    Ok(SplitDataset { train, val })
}

fn load_data(cfg: &RunConfig) -> Result<SplitDataset> {
    match (&cfg.data.dataset, &cfg.data.synthetic) {
        (Some(dir), _) => load_dataset(dir),
        (None, Some(spec)) => synthetic(spec),
        (None, None) => Err(Error::Config("no data: give --dataset or --synthetic".into())),
    }
}

fn max_label(samples: &[SegSample]) -> Option<u8> {
    samples.iter().flat_map(|s| s.labels.data.iter().copied()).filter(|&v| v != IGNORE_INDEX).max()
}

/// Classes implied by the data: declared for synthetic sets, observed otherwise.
fn data_classes(cfg: &RunConfig, data: &SplitDataset) -> usize {
    match cfg.data.synthetic {
        Some(s) => s.classes,
        None => {
            let m = max_label(&data.train).max(max_label(&data.val)).unwrap_or(0);
            (m as usize + 1).max(2)
        }
    }
}

fn check_classes(cfg: &RunConfig, data: &SplitDataset, model_classes: usize) -> Result<()> {
    let found = data_classes(cfg, data);
    let mismatch = match cfg.data.synthetic {
        Some(_) => found != model_classes,
        None => found > model_classes,
    };
    if mismatch {
        return Err(Error::Config(format!("class-count mismatch: model has {model_classes} classes, data has {found}")));
    }
    Ok(())
}

fn check_sizes(model: &SegmenterConfig, samples: &[SegSample]) -> Result<()> {
    for s in samples {
        let sh = s.image.shape();
        model.check_input(sh.h, sh.w)?;
        if sh.c != model.image_channels {
            return Err(Error::Config(format!("images have {} channels, model expects {}", sh.c, model.image_channels)));
        }
    }
    Ok(())
}

pub fn train(mut cfg: RunConfig) -> Result<()> {
    cfg.check_paths()?;
    let schedule = cfg.resolve_schedule()?;
    let data = load_data(&cfg)?;
    let li = *cfg.model.li.get_or_insert(true);
    let mut model_cfg = match &cfg.model.config {
        Some(p) => SegmenterConfig::load(p)?,
        None => SegmenterConfig::toy(data_classes(&cfg, &data)),
    };
    if !li {
        model_cfg = model_cfg.baseline();
    }
    check_classes(&cfg, &data, model_cfg.num_classes)?;
    check_sizes(&model_cfg, &data.train)?;
    check_sizes(&model_cfg, &data.val)?;

    let out = cfg.output_dir()?.to_path_buf();
    cfg.echo(&out)?;
    let mut model = Segmenter::<f32>::new(model_cfg, schedule.seed)?;

    let log_path = out.join("log.csv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    writeln!(log, "{}", EpochRecord::CSV_HEADER).map_err(|e| io_err(&log_path, e))?;
    println!("{}", EpochRecord::CSV_HEADER);
    let result = train_two_phase(&mut model, &data.train, &data.val, &schedule, |r| {
        let row = r.csv_row();
        println!("{row}");
        // Rows reach the disk as they come, so a diverged run keeps its history.
        let _ = writeln!(log, "{row}").and_then(|_| log.flush());
    });
    log.flush().map_err(|e| io_err(&log_path, e))?;
    let report = result?;

    checkpoint::save(&out.join("checkpoint"), &model)?;
    let val = if data.val.is_empty() {
        None
    } else {
        Some(evaluate(&model, &data.val, &[1.0], schedule.eval_batch)?.miou()?)
    };
    let last = report.epochs.last();
    let metrics = serde_json::json!({
        "li": li,
        "seed": schedule.seed,
        "epochs": report.epochs.len(),
        "params": count_params(&model.config).total(),
        "final_loss": last.map(|r| r.loss),
        "phase1_val_miou": report.phase_end_miou(1),
        "phase2_val_miou": report.phase_end_miou(2),
        "val_miou": val.as_ref().map(|m| m.miou),
        "val_per_class_iou": val.as_ref().map(|m| m.per_class.clone()),
    });
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    write_file(&out.join("metrics.json"), &(text + "\n"))?;
    if let Some(m) = &val {
        print!("{}", m.to_table());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    pub dump_masks: bool,
    pub perfect_oracle: bool,
}

/// Scores the labels converted to one-hot logits, exercising the metric path
/// without a network.
fn perfect_oracle(samples: &[SegSample], classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    for s in samples {
        let l = &s.labels;
        let logits = Tensor4::<f32>::from_fn(Shape4::new(l.n, classes, l.h, l.w), |n, c, y, x| {
            if l.at(n, y, x) as usize == c {
                1.0
            } else {
                0.0
            }
        });
        cm.update(&argmax_channels(&logits), l)?;
    }
    Ok(cm)
}

fn scales_label(set: &[f64]) -> String {
    set.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(";")
}

pub fn eval(mut cfg: RunConfig, opts: EvalOptions) -> Result<()> {
    cfg.check_paths()?;
    let ckpt = cfg.model.checkpoint.clone().ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
    let model = checkpoint::load::<f32>(&ckpt)?;
    let data = load_data(&cfg)?;
    check_classes(&cfg, &data, model.num_classes())?;
    let split = cfg.eval.split.get_or_insert_with(|| "val".into()).clone();
    let samples: Vec<SegSample> = match split.as_str() {
        "val" => data.val,
        "train" => data.train,
        "all" => data.train.into_iter().chain(data.val).collect(),
        other => return Err(Error::Config(format!("unknown split {other:?}; expected train, val or all"))),
    };
    if samples.is_empty() {
        return Err(Error::Config(format!("the {split} split is empty")));
    }
    check_sizes(&model.config, &samples)?;
    let sets = cfg.scale_sets()?;
    cfg.eval.scales = Some(sets.clone());
    let batch = *cfg.eval.batch.get_or_insert(16);
    if opts.dump_masks && cfg.output.dir.is_none() {
        return Err(Error::Config("--dump-masks needs --out".into()));
    }

    let k = model.num_classes();
    let mut csv = String::from("scales,miou");
    for c in 0..k {
        let _ = write!(csv, ",iou_{c}");
    }
    csv.push('\n');
    for set in &sets {
        let cm = if opts.perfect_oracle { perfect_oracle(&samples, k)? } else { evaluate(&model, &samples, set, batch)? };
        let m = cm.miou()?;
        println!("scales {} ({split}, {} images)", scales_label(set), samples.len());
        print!("{}", m.to_table());
        let _ = write!(csv, "{},{:.6}", scales_label(set), m.miou);
        for iou in &m.per_class {
            let _ = write!(csv, ",{}", iou.map_or(String::new(), |v| format!("{v:.6}")));
        }
        csv.push('\n');
    }

    if let Some(out) = cfg.output.dir.clone() {
        cfg.echo(&out)?;
        write_file(&out.join("eval.csv"), &csv)?;
        if opts.dump_masks {
            let dir = out.join("masks");
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            for (i, s) in samples.iter().enumerate() {
                let pred = multiscale_eval(&model, &s.image, &sets[0])?;
                write_mask(&dir.join(format!("{i:05}.png")), &pred)?;
            }
        }
    }
    Ok(())
}

/// Prints every check; `false` when any fails.
pub fn verify(quick: bool, seed: u64, inject_kernel_sign_bug: bool) -> bool {
    let results = run_all(&VerifyOptions { quick, seed, inject_kernel_sign_bug });
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).collect();
    println!("{}/{} checks passed", results.len() - failed.len(), results.len());
    if let Some(worst) = failed.first() {
        println!("worst: {}: {}", worst.name, worst.detail);
    }
    failed.is_empty()
}

pub fn oracle_diff(suites: Vec<&str>, cases: Option<usize>, seed: u64) -> Result<bool> {
    let mut ok = true;
    for name in suites {
        let r = match name {
            "dilated-conv" => dilated_conv_oracle_suite(cases.unwrap_or(100), seed)?,
            "depthwise" => depthwise_oracle_suite(cases.unwrap_or(50), seed)?,
            "li-layer" => li_layer_oracle_suite(cases.unwrap_or(50), seed)?,
            _ => li_conv_oracle_suite(cases.unwrap_or(200), seed)?,
        };
        let pass = r.passes();
        ok &= pass;
        println!("{} {name}: {} cases, {} (tolerance {ORACLE_TOL:e})", if pass { "PASS" } else { "FAIL" }, r.cases, r.report);
    }
    Ok(ok)
}

pub fn kernel_dump(spec: &LIKernelSpec, w: f64) -> Result<String> {
    Ok(build_li_kernel(spec, w)?.to_text())
}

pub fn gen(cfg: RunConfig) -> Result<()> {
    let spec = cfg.data.synthetic.ok_or_else(|| Error::Config("gen needs --synthetic seed=<n> ...".into()))?;
    let out = cfg.output_dir()?;
    let data = synthetic(&spec)?;
    save_dataset(out, &data)?;
    cfg.echo(out)?;
    println!("wrote {} train and {} val images to {}", data.train.len(), data.val.len(), out.display());
    Ok(())
}

fn model_config(path: Option<&Path>, classes: usize) -> Result<SegmenterConfig> {
    match path {
        Some(p) => SegmenterConfig::load(p),
        None => Ok(SegmenterConfig::toy(classes)),
    }
}

pub fn count(path: Option<&Path>, classes: usize, li: bool, size: usize, csv: bool) -> Result<String> {
    let mut cfg = model_config(path, classes)?;
    if !li {
        cfg = cfg.baseline();
    }
    let flops = count_flops(&cfg, size, size)?;
    if csv {
        return Ok(flops.to_csv());
    }
    let p = count_params(&cfg);
    let base = count_params(&cfg.baseline());
    let mut s = String::new();
    let _ = writeln!(s, "params total     {}", p.total());
    let _ = writeln!(s, "  conv weights   {}", p.conv_weights);
    let _ = writeln!(s, "  biases         {}", p.other);
    let _ = writeln!(s, "  LI weights     {}", p.li_weights);
    let _ = writeln!(s, "  vs. baseline   +{}", p.total() - base.total());
    let _ = writeln!(s, "MACs at {size}x{size}  {}", flops.total());
    let _ = writeln!(s, "  LI share       {:.4}%", 100.0 * flops.li_fraction());
    Ok(s)
}

pub struct BenchOptions {
    pub grid: Option<BenchGrid>,
    pub reps: Repetitions,
    /// Model config, square input side, batch.
    pub model: Option<(Option<PathBuf>, usize, usize)>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn bench(opts: BenchOptions) -> Result<()> {
    let mut files: Vec<(&str, String)> = Vec::new();
    if let Some(grid) = &opts.grid {
        let rows = bench::run_grid(grid, opts.reps, opts.seed)?;
        files.push(("bench_grid.csv", bench::grid_to_csv(&rows)));
    }
    if let Some((path, size, batch)) = &opts.model {
        let cfg = model_config(path.as_deref(), 4)?;
        let inf = bench::model_inference(&cfg, *size, *batch, opts.reps, opts.seed)?;
        files.push(("bench_model.csv", inf.to_csv()));
        let step = bench::model_train_step(&cfg, *size, *batch, opts.reps, opts.seed)?;
        files.push(("bench_train_step.csv", step.to_csv()));
    }
    for (name, text) in &files {
        println!("# {name}");
        print!("{text}");
    }
    if let Some(out) = &opts.out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        for (name, text) in &files {
            write_file(&out.join(name), text)?;
        }
    }
    Ok(())
}

pub fn dump_features(cfg: RunConfig, image: &Path, layer: &str) -> Result<()> {
    cfg.check_paths()?;
    if !image.exists() {
        return Err(Error::Config(format!("image {} does not exist", image.display())));
    }
    let ckpt = cfg.model.checkpoint.as_deref().ok_or_else(|| Error::Config("dump-features needs --checkpoint".into()))?;
    let out = cfg.output_dir()?;
    let model = checkpoint::load::<f32>(ckpt)?;
    let x = read_image(image)?;
    let s = x.shape();
    model.config.check_input(s.h, s.w)?;
    let f = li_features(&model, &x, layer)?;
    let dump = write_features(out, &f)?;
    cfg.echo(out)?;
    println!("layer {layer}: {} channels", f.pre.shape().c);
    println!("pre mean  {:.6}", f.pre_mean());
    println!("post mean {:.6}", f.post_mean());
    println!("wrote {} and {} images to {}", dump.pre_images.len(), dump.post_images.len(), out.display());
    Ok(())
}
