//! Channel activations around one LI layer, for inspection.
//!
//! `pre` is the rectified input of the layer and `post` its output before
//! φ. A dump directory holds `pre.lit4`, `post.lit4`, and one min–max
//! normalised grayscale PNG per channel and image under `pre/` and `post/`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::tape::Tape;
use crate::data::io::{normalized_gray, write_gray};
use crate::error::{Error, Result};
use crate::lit4;
use crate::models::segmenter::Segmenter;
use crate::tensor::Tensor4;

#[derive(Debug, Clone)]
pub struct LiFeatures {
    pub layer: String,
    pub pre: Tensor4<f32>,
    pub post: Tensor4<f32>,
}

impl LiFeatures {
    pub fn pre_mean(&self) -> f64 {
        self.pre.mean()
    }

    pub fn post_mean(&self) -> f64 {
        self.post.mean()
    }
}

/// Runs `image` through `model` and captures the named LI layer.
pub fn li_features(model: &Segmenter<f32>, image: &Tensor4<f32>, layer: &str) -> Result<LiFeatures> {
    let names = model.li_layer_names();
    if !names.iter().any(|n| n == layer) {
        let valid = if names.is_empty() { "none (the model has no LI layers)".to_string() } else { names.join(", ") };
        return Err(Error::Config(format!("unknown LI layer {layer:?}; valid layers: {valid}")));
    }
    let mut tape = Tape::new();
    let x = tape.input(image.clone());
    let out = model.forward(&mut tape, x)?;
    let tap = out.taps.iter().find(|t| t.name == layer).expect("every named layer records a tap");
    Ok(LiFeatures { layer: layer.to_string(), pre: tape.value(tap.pre).clone(), post: tape.value(tap.post).clone() })
}

/// Files written by [`write_features`].
#[derive(Debug, Clone)]
pub struct FeatureDump {
    pub pre_tensor: PathBuf,
    pub post_tensor: PathBuf,
    pub pre_images: Vec<PathBuf>,
    pub post_images: Vec<PathBuf>,
}

fn write_planes(dir: &Path, t: &Tensor4<f32>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = t.shape();
    let mut paths = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let name = if s.n == 1 { format!("ch{c:03}.png") } else { format!("n{n}_ch{c:03}.png") };
            let path = dir.join(name);
            write_gray(&path, s.h, s.w, normalized_gray(t.plane(n, c)))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

pub fn write_features(dir: &Path, f: &LiFeatures) -> Result<FeatureDump> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pre_tensor = dir.join("pre.lit4");
    let post_tensor = dir.join("post.lit4");
    lit4::write(&pre_tensor, &f.pre)?;
    lit4::write(&post_tensor, &f.post)?;
    Ok(FeatureDump {
        pre_images: write_planes(&dir.join("pre"), &f.pre)?,
        post_images: write_planes(&dir.join("post"), &f.post)?,
        pre_tensor,
        post_tensor,
    })
}
