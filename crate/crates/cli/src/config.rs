//! Run configuration: a TOML file of `key = value` lines under sections,
//! overlaid by command-line flags.
//!
//! ```toml
//! [data]
//! dataset = "data/contours"          # or a [data.synthetic] table
//!
//! [data.synthetic]
//! seed = 7
//! classes = 4
//! train = 64
//! val = 16
//! size = 33
//!
//! [model]
//! config = "model.toml"              # default: the toy segmenter
//! checkpoint = "runs/a/checkpoint"   # eval and dump-features
//! li = true
//!
//! [schedule]
//! epochs = 30
//! li_finetune = 10
//! batch = 8
//! lr = 3e-4
//! epsilon = 0.01
//! l2 = 4e-5
//! seed = 7
//! scale_min = 0.75
//! scale_max = 1.25
//!
//! [eval]
//! scales = [[1.0], [0.5, 1.0, 1.75]]
//! batch = 16
//! split = "val"
//!
//! [output]
//! dir = "runs/a"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use liconv::autodiff::{AdamConfig, Schedule};
use liconv::{Error, Result};
use serde::{Deserialize, Serialize};

/// File written into every output directory.
pub const ECHO_FILE: &str = "effective_config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub data: DataSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub eval: EvalSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dataset: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    #[serde(default = "SyntheticSpec::default_classes")]
    pub classes: usize,
    #[serde(default = "SyntheticSpec::default_train")]
    pub train: usize,
    #[serde(default = "SyntheticSpec::default_val")]
    pub val: usize,
    #[serde(default = "SyntheticSpec::default_size")]
    pub size: usize,
}

impl SyntheticSpec {
    fn default_classes() -> usize {
        4
    }
    fn default_train() -> usize {
        64
    }
    fn default_val() -> usize {
        16
    }
    fn default_size() -> usize {
        33
    }

    /// Parses `seed=7 classes=4 ...`; `seed` is required.
    pub fn parse(pairs: &[String]) -> Result<Self> {
        let mut seed = None;
        let mut spec = SyntheticSpec {
            seed: 0,
            classes: Self::default_classes(),
            train: Self::default_train(),
            val: Self::default_val(),
            size: Self::default_size(),
        };
        for pair in pairs {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("synthetic option {pair:?} is not key=value")))?;
            let num = |v: &str| v.trim().parse::<u64>().map_err(|_| Error::Config(format!("synthetic {k}={v} is not an integer")));
            match k.trim() {
                "seed" => seed = Some(num(v)?),
                "classes" => spec.classes = num(v)? as usize,
                "train" => spec.train = num(v)? as usize,
                "val" => spec.val = num(v)? as usize,
                "size" => spec.size = num(v)? as usize,
                other => {
                    return Err(Error::Config(format!(
                        "unknown synthetic option {other:?}; expected seed, classes, train, val, size"
                    )))
                }
            }
        }
        spec.seed = seed.ok_or_else(|| Error::Config("synthetic data needs seed=<n>".into()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub li: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub epochs: Option<usize>,
    pub li_finetune: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub epsilon: Option<f64>,
    pub l2: Option<f64>,
    pub seed: Option<u64>,
    pub scale_min: Option<f64>,
    pub scale_max: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub scales: Option<Vec<Vec<f64>>>,
    pub batch: Option<usize>,
    pub split: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

fn overlay<T>(base: &mut Option<T>, over: Option<T>) {
    if over.is_some() {
        *base = over;
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `file` (if any) with every value set in `self` taking precedence.
    pub fn over(self, file: Option<&Path>) -> Result<Self> {
        let mut base = match file {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        base.merge(self);
        Ok(base)
    }

    pub fn merge(&mut self, o: RunConfig) {
        overlay(&mut self.command, o.command);
        if o.data.dataset.is_some() || o.data.synthetic.is_some() {
            self.data = o.data;
        }
        overlay(&mut self.model.config, o.model.config);
        overlay(&mut self.model.checkpoint, o.model.checkpoint);
        overlay(&mut self.model.li, o.model.li);
        let (s, os) = (&mut self.schedule, o.schedule);
        overlay(&mut s.epochs, os.epochs);
        overlay(&mut s.li_finetune, os.li_finetune);
        overlay(&mut s.batch, os.batch);
        overlay(&mut s.lr, os.lr);
        overlay(&mut s.epsilon, os.epsilon);
        overlay(&mut s.l2, os.l2);
        overlay(&mut s.seed, os.seed);
        overlay(&mut s.scale_min, os.scale_min);
        overlay(&mut s.scale_max, os.scale_max);
        overlay(&mut self.eval.scales, o.eval.scales);
        overlay(&mut self.eval.batch, o.eval.batch);
        overlay(&mut self.eval.split, o.eval.split);
        overlay(&mut self.output.dir, o.output.dir);
    }

    /// Every referenced input path must exist.
    pub fn check_paths(&self) -> Result<()> {
        let inputs = [
            ("data.dataset", &self.data.dataset),
            ("model.config", &self.model.config),
            ("model.checkpoint", &self.model.checkpoint),
        ];
        for (key, path) in inputs {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        if self.data.dataset.is_some() && self.data.synthetic.is_some() {
            return Err(Error::Config("give either data.dataset or data.synthetic, not both".into()));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output.dir.as_deref().ok_or_else(|| Error::Config("an output directory is required (--out)".into()))
    }

    /// Training seed: `schedule.seed`, else the synthetic data seed.
    pub fn seed(&self) -> Result<u64> {
        self.schedule
            .seed
            .or(self.data.synthetic.map(|s| s.seed))
            .ok_or_else(|| Error::Config("a seed is required (--seed or synthetic seed=<n>)".into()))
    }

    /// The two-phase schedule, with CLI defaults filled back into `self`.
    pub fn resolve_schedule(&mut self) -> Result<Schedule> {
        let seed = self.seed()?;
        let d = Schedule::default();
        let adam = AdamConfig::default();
        let s = &mut self.schedule;
        let main_epochs = *s.epochs.get_or_insert(d.main_epochs);
        let li_finetune_epochs = *s.li_finetune.get_or_insert(0);
        let batch_size = *s.batch.get_or_insert(d.batch_size);
        let lr = *s.lr.get_or_insert(adam.lr);
        let epsilon = *s.epsilon.get_or_insert(adam.epsilon);
        let l2_lambda = *s.l2.get_or_insert(d.l2_lambda);
        let scale_range = (*s.scale_min.get_or_insert(d.scale_range.0), *s.scale_max.get_or_insert(d.scale_range.1));
        s.seed = Some(seed);
        let eval_batch = *self.eval.batch.get_or_insert(d.eval_batch);
        let schedule = Schedule {
            main_epochs,
            li_finetune_epochs,
            batch_size,
            adam: AdamConfig { lr, epsilon, ..adam },
            l2_lambda,
            scale_range,
            seed,
            eval_batch,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn scale_sets(&self) -> Result<Vec<Vec<f64>>> {
        let sets = self.eval.scales.clone().unwrap_or_else(|| vec![vec![1.0]]);
        for set in &sets {
            if set.is_empty() || set.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::Config(format!("scale set {set:?} must be non-empty and positive")));
            }
        }
        Ok(sets)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, self.to_toml()).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}
