//! Checkpoint directory: `model.toml`, `manifest.txt`, and one LIT4 file per
//! parameter under `params/`.
//!
//! Manifest lines are tab-separated: `name  n,c,h,w  group  frozen`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::params::{ParamGroup, ParamStore};
use crate::error::{Error, Result};
use crate::lit4;
use crate::models::config::SegmenterConfig;
use crate::models::segmenter::Segmenter;
use crate::scalar::Scalar;
use crate::tensor::Shape4;

pub const MANIFEST: &str = "manifest.txt";
pub const MODEL_CONFIG: &str = "model.toml";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save<T: Scalar>(dir: &Path, model: &Segmenter<T>) -> Result<()> {
    let params_dir = dir.join("params");
    create_dir(&params_dir)?;
    let mut manifest = String::new();
    for (_, p) in model.params.iter() {
        lit4::write(&params_dir.join(format!("{}.lit4", p.name)), &p.value)?;
        let s = p.value.shape();
        let _ = writeln!(manifest, "{}\t{},{},{},{}\t{}\t{}", p.name, s.n, s.c, s.h, s.w, p.group.as_str(), p.frozen);
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(MODEL_CONFIG);
    fs::write(&path, model.config.to_toml()).map_err(|e| Error::io(&path, e))
}

fn parse_shape(s: &str) -> Option<Shape4> {
    let d: Vec<usize> = s.split(',').map(|v| v.trim().parse().ok()).collect::<Option<_>>()?;
    (d.len() == 4).then(|| Shape4::new(d[0], d[1], d[2], d[3]))
}

pub fn load<T: Scalar>(dir: &Path) -> Result<Segmenter<T>> {
    let config = SegmenterConfig::load(&dir.join(MODEL_CONFIG))?;
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut store = ParamStore::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |why: &str| Error::format(&path, format!("line {}: {why}", i + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, shape, group, frozen] = fields[..] else {
            return Err(bad("expected 4 tab-separated fields"));
        };
        let shape = parse_shape(shape).ok_or_else(|| bad("bad shape"))?;
        let group = ParamGroup::parse(group).ok_or_else(|| bad("unknown group"))?;
        let frozen: bool = frozen.parse().map_err(|_| bad("frozen must be true or false"))?;
        let value = lit4::read::<T>(&dir.join("params").join(format!("{name}.lit4")))?;
        if value.shape() != shape {
            return Err(bad(&format!("tensor file has shape {}, manifest says {shape}", value.shape())));
        }
        let id = store.add(name, value, group)?;
        store.set_frozen(id, frozen);
    }
    Segmenter::with_params(config, store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Segmenter::<f32>::new(SegmenterConfig::toy(4), 5).unwrap();
        let id = m.params.find("backbone.block6.li.w_l").unwrap();
        m.params.value_mut(id).fill(0.25);
        m.params.freeze_all_except(ParamGroup::LiWeights);
        save(dir.path(), &m).unwrap();
        let back: Segmenter<f32> = load(dir.path()).unwrap();
        assert_eq!(back.params.len(), m.params.len());
        for (id, p) in m.params.iter() {
            let q = back.params.param(id);
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
            assert_eq!(p.frozen, q.frozen);
            assert_eq!(p.group, q.group);
        }
    }

    #[test]
    fn corrupt_manifest_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = Segmenter::<f32>::new(SegmenterConfig::toy(2), 5).unwrap();
        save(dir.path(), &m).unwrap();
        fs::write(dir.path().join(MANIFEST), "x\t1,2\tconv_weights\tfalse\n").unwrap();
        assert!(matches!(load::<f32>(dir.path()), Err(Error::Format { .. })));
    }
}
