use crate::error::{Error, Result};

/// Label value that is never scored.
pub const IGNORE_INDEX: u8 = 255;

/// Integer class map of shape `N×H×W`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::Dimension(format!("label map {n}x{h}x{w} with {} values", data.len())));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        LabelMap { n, h, w, data: vec![value; n * h * w] }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }

    pub fn item(&self, n: usize) -> LabelMap {
        let p = self.plane();
        LabelMap { n: 1, h: self.h, w: self.w, data: self.data[n * p..(n + 1) * p].to_vec() }
    }

    /// Stacks single-item maps of equal size into a batch.
    pub fn stack(items: &[&LabelMap]) -> Result<LabelMap> {
        let first = items.first().ok_or_else(|| Error::Dimension("empty label batch".into()))?;
        let mut data = Vec::with_capacity(items.len() * first.plane() * first.n);
        let mut n = 0;
        for it in items {
            if it.h != first.h || it.w != first.w {
                return Err(Error::Dimension(format!(
                    "label maps {}x{} and {}x{} cannot be stacked",
                    it.h, it.w, first.h, first.w
                )));
            }
            n += it.n;
            data.extend_from_slice(&it.data);
        }
        LabelMap::new(n, first.h, first.w, data)
    }

    /// Distinct values present, ascending.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }

    pub fn count(&self, value: u8) -> usize {
        self.data.iter().filter(|&&v| v == value).count()
    }
}
