use std::fmt::Write as _;

use crate::data::labels::{LabelMap, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub miou: f64,
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
}

impl MiouReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            let _ = writeln!(s, "{c},{}", iou.map_or(String::from("absent"), |v| format!("{v:.6}")));
        }
        let _ = writeln!(s, "mean,{:.6}", self.miou);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("class   IoU\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            let _ = writeln!(s, "{c:>5}   {}", iou.map_or(String::from("  -"), |v| format!("{:.2}%", 100.0 * v)));
        }
        let _ = writeln!(s, " mIoU   {:.2}%", 100.0 * self.miou);
        s
    }
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose truth label is not [`IGNORE_INDEX`].
    pub fn update(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (truth.n, truth.h, truth.w) {
            return Err(Error::Dimension(format!(
                "prediction {}x{}x{} vs truth {}x{}x{}",
                pred.n, pred.h, pred.w, truth.n, truth.h, truth.w
            )));
        }
        let k = self.num_classes;
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == IGNORE_INDEX {
                continue;
            }
            if t as usize >= k || p as usize >= k {
                return Err(Error::Data(format!("class id {} outside [0, {k})", t.max(p))));
            }
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t != IGNORE_INDEX {
                self.counts[t as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Dimension(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `IoU_c = TP/(TP+FP+FN)` averaged over classes present in truth or prediction.
    pub fn miou(&self) -> Result<MiouReport> {
        let k = self.num_classes;
        let mut per_class = Vec::with_capacity(k);
        for c in 0..k {
            let tp = self.get(c, c);
            let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let col: u64 = (0..k).map(|t| self.get(t, c)).sum();
            let union = row + col - tp;
            per_class.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
        if scored.is_empty() {
            return Err(Error::UndefinedMetric);
        }
        Ok(MiouReport { miou: scored.iter().sum::<f64>() / scored.len() as f64, per_class })
    }
}

/// Per-pixel argmax over channels; the lowest index wins ties.
pub fn argmax_channels<T: Scalar>(scores: &Tensor4<T>) -> LabelMap {
    let s = scores.shape();
    let p = s.plane();
    let mut out = LabelMap::filled(s.n, s.h, s.w, 0);
    for n in 0..s.n {
        let src = scores.item(n);
        for i in 0..p {
            let mut best = 0;
            for c in 1..s.c {
                if src[c * p + i] > src[best * p + i] {
                    best = c;
                }
            }
            out.data[n * p + i] = best as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let t = LabelMap::new(1, 2, 2, vec![0, 1, 2, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&t, &t).unwrap();
        assert_eq!(cm.miou().unwrap().miou, 1.0);
        assert_eq!(cm.get(1, 1), 2);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn hand_two_class_matrix() {
        let cm = ConfusionMatrix { num_classes: 2, counts: vec![3, 1, 1, 3] };
        let r = cm.miou().unwrap();
        assert!((r.miou - 0.6).abs() < 1e-15);
        assert_eq!(r.per_class, vec![Some(0.6), Some(0.6)]);
    }

    #[test]
    fn all_class_zero_on_balanced_data() {
        let truth = LabelMap::new(1, 1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::filled(1, 1, 4, 0);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&pred, &truth).unwrap();
        assert!((cm.miou().unwrap().miou - 0.25).abs() < 1e-15);
    }

    #[test]
    fn one_error_and_ignore() {
        let truth = LabelMap::new(1, 2, 2, vec![0, 1, 1, IGNORE_INDEX]).unwrap();
        let pred = LabelMap::new(1, 2, 2, vec![0, 0, 1, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&pred, &truth).unwrap();
        assert_eq!(cm.counts, vec![1, 0, 1, 1]);
        let all_ignored = LabelMap::filled(1, 2, 2, IGNORE_INDEX);
        let before = cm.clone();
        cm.update(&pred, &all_ignored).unwrap();
        assert_eq!(cm, before);
        assert!(matches!(ConfusionMatrix::new(2).miou(), Err(Error::UndefinedMetric)));
        let bad = LabelMap::filled(1, 2, 2, 2);
        assert!(matches!(cm.update(&bad, &truth), Err(Error::Data(_))));
    }

    #[test]
    fn absent_class_excluded() {
        let t = LabelMap::new(1, 1, 2, vec![0, 2]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&t, &t).unwrap();
        let r = cm.miou().unwrap();
        assert_eq!(r.per_class[1], None);
        assert_eq!(r.miou, 1.0);
    }

    fn labels(k: u8, len: usize) -> impl Strategy<Value = Vec<u8>> {
        prop::collection::vec(prop_oneof![4 => 0..k, 1 => Just(IGNORE_INDEX)], len)
    }

    proptest! {
        #[test]
        fn update_is_additive_over_partitions(
            (truth, pred) in (labels(4, 24), prop::collection::vec(0u8..4, 24)),
            split in 0usize..=24,
        ) {
            let whole = {
                let mut cm = ConfusionMatrix::new(4);
                cm.update(&LabelMap::new(1, 1, 24, pred.clone()).unwrap(), &LabelMap::new(1, 1, 24, truth.clone()).unwrap()).unwrap();
                cm
            };
            let mut a = ConfusionMatrix::new(4);
            let mut b = ConfusionMatrix::new(4);
            a.update(&LabelMap::new(1, 1, split, pred[..split].to_vec()).unwrap(), &LabelMap::new(1, 1, split, truth[..split].to_vec()).unwrap()).unwrap();
            b.update(&LabelMap::new(1, 1, 24 - split, pred[split..].to_vec()).unwrap(), &LabelMap::new(1, 1, 24 - split, truth[split..].to_vec()).unwrap()).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(&a, &whole);
            prop_assert_eq!(whole.total() as usize, truth.iter().filter(|&&t| t != IGNORE_INDEX).count());
        }

        #[test]
        fn miou_is_permutation_equivariant(counts in prop::collection::vec(0u64..20, 16), perm_seed in 0usize..24) {
            let cm = ConfusionMatrix { num_classes: 4, counts };
            let mut perm: Vec<usize> = (0..4).collect();
            // all 24 permutations of 4 indices via factorial numbering
            let mut k = perm_seed;
            for i in (1..4usize).rev() {
                let f = (1..=i).product::<usize>();
                let j = k / f;
                k %= f;
                perm.swap(i, i - j);
            }
            let mut permuted = ConfusionMatrix::new(4);
            for t in 0..4 {
                for p in 0..4 {
                    permuted.counts[perm[t] * 4 + perm[p]] = cm.get(t, p);
                }
            }
            match (cm.miou(), permuted.miou()) {
                (Ok(a), Ok(b)) => {
                    prop_assert!((a.miou - b.miou).abs() < 1e-12);
                    for c in 0..4 {
                        prop_assert_eq!(a.per_class[c], b.per_class[perm[c]]);
                    }
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "definedness changed under permutation"),
            }
        }
    }
}
