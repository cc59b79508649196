//! On-disk datasets: `images/<stem>.png|pgm`, `masks/<stem>.png|pgm`, and a
//! `manifest.txt` of `<stem> <split>` lines.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::data::labels::LabelMap;
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<SegSample>,
    pub val: Vec<SegSample>,
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for ext in ["png", "pgm"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Data(format!("no {stem}.png or {stem}.pgm in {}", dir.display())))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_image(path: &Path) -> Result<Tensor4<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor4::zeros(Shape4::new(1, 3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, px[c] as f32 / 255.0);
        }
    }
    Ok(t)
}

pub fn read_mask(path: &Path) -> Result<LabelMap> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    LabelMap::new(1, h, w, img.into_raw())
}

/// Writes channels `0..3` of item 0 (a single channel is replicated) as 8-bit RGB.
pub fn write_image(path: &Path, t: &Tensor4<f32>) -> Result<()> {
    let s = t.shape();
    let mut img = RgbImage::new(s.w as u32, s.h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = t.at(0, c.min(s.c - 1), y as usize, x as usize);
            px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_gray(path: &Path, h: usize, w: usize, values: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, values)
        .ok_or_else(|| Error::Dimension(format!("gray image {h}x{w} with wrong buffer size")))?;
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_mask(path: &Path, labels: &LabelMap) -> Result<()> {
    let p = labels.plane();
    write_gray(path, labels.h, labels.w, labels.data[..p].to_vec())
}

/// Min–max normalises one plane to 8-bit; a constant plane maps to zero.
pub fn normalized_gray(plane: &[f32]) -> Vec<u8> {
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi - lo;
    plane
        .iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range * 255.0).round() as u8 } else { 0 })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<SplitDataset> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = SplitDataset::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(stem), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::format(&path, format!("line {}: expected `<stem> <split>`", i + 1)));
        };
        let image = read_image(&find_file(&dir.join("images"), stem)?)?;
        let labels = read_mask(&find_file(&dir.join("masks"), stem)?)?;
        if (labels.h, labels.w) != (image.shape().h, image.shape().w) {
            return Err(Error::Data(format!("{stem}: mask size differs from image size")));
        }
        let sample = SegSample { image, labels };
        match split {
            "train" => out.train.push(sample),
            "val" => out.val.push(sample),
            other => return Err(Error::format(&path, format!("line {}: unknown split `{other}`", i + 1))),
        }
    }
    Ok(out)
}

pub fn save_dataset(dir: &Path, data: &SplitDataset) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = String::new();
    for (split, samples) in [("train", &data.train), ("val", &data.val)] {
        for (i, s) in samples.iter().enumerate() {
            let stem = format!("{split}_{i:05}");
            write_image(&dir.join("images").join(format!("{stem}.png")), &s.image)?;
            write_mask(&dir.join("masks").join(format!("{stem}.png")), &s.labels)?;
            let _ = writeln!(manifest, "{stem} {split}");
        }
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::gen_synthetic_contours;

    #[test]
    fn round_trip_quantises_images_and_keeps_labels() {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_synthetic_contours(1, 3, 4, 24).unwrap();
        let data = SplitDataset { train: samples[..2].to_vec(), val: samples[2..].to_vec() };
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.train.len(), 2);
        assert_eq!(back.val.len(), 1);
        for (a, b) in data.train.iter().zip(&back.train) {
            assert_eq!(a.labels, b.labels);
            assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
        }
    }

    #[test]
    fn pgm_masks_and_bad_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        write_image(&dir.path().join("images/a.png"), &Tensor4::full(Shape4::new(1, 3, 4, 4), 0.5)).unwrap();
        fs::write(dir.path().join("masks/a.pgm"), b"P5\n4 4\n255\n\x00\x01\x02\xff\x00\x01\x02\xff\x00\x01\x02\xff\x00\x01\x02\xff").unwrap();
        fs::write(dir.path().join(MANIFEST), "a val\n").unwrap();
        let d = load_dataset(dir.path()).unwrap();
        assert_eq!(d.val[0].labels.data[..4], [0, 1, 2, 255]);
        fs::write(dir.path().join(MANIFEST), "a test\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalized_gray(&[1.0, 2.0, 3.0]), vec![0, 128, 255]);
        assert_eq!(normalized_gray(&[2.0, 2.0]), vec![0, 0]);
    }
}
