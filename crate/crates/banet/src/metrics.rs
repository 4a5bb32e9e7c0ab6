//! Confusion-matrix accumulation and segmentation metrics: overall
//! accuracy, per-class IoU and F1, and their means over a class subset.
//!
//! Rows index the reference class, columns the predicted class. Matrices
//! merge by elementwise sum, so partial accumulations over any pixel
//! partition compose exactly.

use crate::error::{ensure, invalid, Result};
use crate::map::ClassMap;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    class_names: Vec<String>,
    ignore_label: Option<u8>,
}

impl ConfusionMatrix {
    pub fn new(class_names: &[String], ignore_label: Option<u8>) -> Result<Self> {
        let k = class_names.len();
        ensure!(k >= 2, "confusion matrix needs at least 2 classes, got {k}");
        if let Some(ig) = ignore_label {
            ensure!(
                (ig as usize) >= k,
                "ignore label {ig} collides with class indices [0, {k})"
            );
        }
        Ok(Self {
            k,
            counts: vec![0; k * k],
            class_names: class_names.to_vec(),
            ignore_label,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn count(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.k + predicted]
    }

    /// Scored (non-ignored) pixel total.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/reference pair. Reference pixels equal to the
    /// ignore label are skipped.
    pub fn accumulate(&mut self, pred: &ClassMap, reference: &ClassMap) -> Result<()> {
        ensure!(
            pred.width() == reference.width() && pred.height() == reference.height(),
            "prediction {}x{} vs reference {}x{}",
            pred.width(),
            pred.height(),
            reference.width(),
            reference.height()
        );
        for y in 0..pred.height() {
            for x in 0..pred.width() {
                let r = reference.get(y, x);
                if Some(r) == self.ignore_label {
                    continue;
                }
                let p = pred.get(y, x);
                if r as usize >= self.k {
                    invalid!("reference class {r} at (y={y}, x={x}) is outside [0, {})", self.k);
                }
                if p as usize >= self.k {
                    invalid!("predicted class {p} at (y={y}, x={x}) is outside [0, {})", self.k);
                }
                self.counts[r as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise sum; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        ensure!(
            self.k == other.k,
            "cannot merge {}-class and {}-class matrices",
            self.k,
            other.k
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, r: usize) -> u64 {
        (0..self.k).map(|p| self.count(r, p)).sum()
    }

    fn col_sum(&self, p: usize) -> u64 {
        (0..self.k).map(|r| self.count(r, p)).sum()
    }

    /// trace / total scored pixels. `None` when nothing was scored.
    pub fn overall_accuracy(&self) -> Option<f64> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        let trace: u64 = (0..self.k).map(|i| self.count(i, i)).sum();
        Some(trace as f64 / total as f64)
    }

    /// IoU_k = TP / (TP + FP + FN); `None` for classes absent from both
    /// prediction and reference.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.count(c, c);
                let denom = self.row_sum(c) + self.col_sum(c) - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over `subset` (all classes when `None`); undefined classes
    /// are excluded from the mean.
    pub fn miou(&self, subset: Option<&[usize]>) -> Option<f64> {
        mean_over(&self.iou_per_class(), subset, self.k)
    }

    /// F1_k = 2 p r / (p + r) with the 0/0 -> 0 convention for empty
    /// precision or recall; `None` only for classes absent from both sides.
    pub fn f1_per_class(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.count(c, c) as f64;
                let pred = self.col_sum(c) as f64;
                let refs = self.row_sum(c) as f64;
                if pred == 0.0 && refs == 0.0 {
                    return None;
                }
                let precision = if pred > 0.0 { tp / pred } else { 0.0 };
                let recall = if refs > 0.0 { tp / refs } else { 0.0 };
                if precision + recall == 0.0 {
                    Some(0.0)
                } else {
                    Some(2.0 * precision * recall / (precision + recall))
                }
            })
            .collect()
    }

    pub fn mean_f1(&self, subset: Option<&[usize]>) -> Option<f64> {
        mean_over(&self.f1_per_class(), subset, self.k)
    }

    /// Human-readable table plus a machine-readable key=value block.
    pub fn report(&self, subset: Option<&[usize]>) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        if self.total() == 0 {
            out.push_str("no data: 0 scored pixels\n");
            out.push_str("scored_pixels=0\n");
            return out;
        }
        let f1 = self.f1_per_class();
        let iou = self.iou_per_class();
        let name_w = self
            .class_names
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let _ = writeln!(out, "{:name_w$}  {:>8}  {:>8}", "class", "F1", "IoU");
        for c in 0..self.k {
            let _ = writeln!(
                out,
                "{:name_w$}  {:>8}  {:>8}",
                self.class_names[c],
                pct(f1[c]),
                pct(iou[c])
            );
        }
        let mean_f1 = self.mean_f1(subset);
        let oa = self.overall_accuracy();
        let miou = self.miou(subset);
        let _ = writeln!(
            out,
            "mean F1 {}  OA {}  mIoU {}",
            pct(mean_f1),
            pct(oa),
            pct(miou)
        );
        // key=value block for scripting
        let _ = writeln!(out, "scored_pixels={}", self.total());
        let _ = writeln!(out, "oa={}", frac(oa));
        let _ = writeln!(out, "miou={}", frac(miou));
        let _ = writeln!(out, "mean_f1={}", frac(mean_f1));
        for c in 0..self.k {
            let _ = writeln!(out, "f1_{}={}", self.class_names[c], frac(f1[c]));
            let _ = writeln!(out, "iou_{}={}", self.class_names[c], frac(iou[c]));
        }
        out
    }
}

fn mean_over(values: &[Option<f64>], subset: Option<&[usize]>, k: usize) -> Option<f64> {
    let all: Vec<usize> = (0..k).collect();
    let idx = subset.unwrap_or(&all);
    let defined: Vec<f64> = idx.iter().filter_map(|&c| values.get(c).copied().flatten()).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", v * 100.0),
        None => "undef".to_string(),
    }
}

fn frac(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "undef".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("class{i}")).collect()
    }

    /// The spec's hand case: ref = 0000111111, pred = 0001001111.
    fn hand_case() -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(&names(2), None).unwrap();
        let reference = ClassMap::new(10, 1, vec![0, 0, 0, 0, 1, 1, 1, 1, 1, 1]).unwrap();
        let pred = ClassMap::new(10, 1, vec![0, 0, 0, 1, 0, 0, 1, 1, 1, 1]).unwrap();
        cm.accumulate(&pred, &reference).unwrap();
        cm
    }

    #[test]
    fn hand_counts() {
        let cm = hand_case();
        assert_eq!(
            [cm.count(0, 0), cm.count(0, 1), cm.count(1, 0), cm.count(1, 1)],
            [3, 1, 2, 4]
        );
    }

    #[test]
    fn hand_metrics() {
        let cm = hand_case();
        assert_eq!(cm.overall_accuracy(), Some(0.7));
        let iou = cm.iou_per_class();
        assert!((iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((iou[1].unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert!((cm.miou(None).unwrap() - 0.5357142857142857).abs() < 1e-9);
        let f1 = cm.f1_per_class();
        assert!((f1[0].unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_all_wrong() {
        let mut cm = ConfusionMatrix::new(&names(2), None).unwrap();
        let m = ClassMap::new(4, 1, vec![0, 1, 0, 1]).unwrap();
        cm.accumulate(&m, &m).unwrap();
        assert_eq!(cm.overall_accuracy(), Some(1.0));
        assert!(cm.iou_per_class().iter().all(|v| *v == Some(1.0)));

        let mut cm = ConfusionMatrix::new(&names(2), None).unwrap();
        let a = ClassMap::new(4, 1, vec![0, 0, 1, 1]).unwrap();
        let b = ClassMap::new(4, 1, vec![1, 1, 0, 0]).unwrap();
        cm.accumulate(&a, &b).unwrap();
        assert_eq!(cm.overall_accuracy(), Some(0.0));
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let reference = ClassMap::new(4, 2, vec![0, 1, 2, 0, 1, 2, 0, 1]).unwrap();
        let pred = ClassMap::new(4, 2, vec![0, 2, 2, 1, 1, 0, 0, 1]).unwrap();
        let top_r = ClassMap::new(4, 1, reference.data()[..4].to_vec()).unwrap();
        let top_p = ClassMap::new(4, 1, pred.data()[..4].to_vec()).unwrap();
        let bot_r = ClassMap::new(4, 1, reference.data()[4..].to_vec()).unwrap();
        let bot_p = ClassMap::new(4, 1, pred.data()[4..].to_vec()).unwrap();

        let mut joint = ConfusionMatrix::new(&names(3), None).unwrap();
        joint.accumulate(&pred, &reference).unwrap();

        let mut a = ConfusionMatrix::new(&names(3), None).unwrap();
        a.accumulate(&top_p, &top_r).unwrap();
        let mut b = ConfusionMatrix::new(&names(3), None).unwrap();
        b.accumulate(&bot_p, &bot_r).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, joint);
    }

    #[test]
    fn absent_class_is_undefined_and_excluded() {
        let mut cm = ConfusionMatrix::new(&names(3), None).unwrap();
        let m = ClassMap::new(4, 1, vec![0, 1, 0, 1]).unwrap(); // class 2 never appears
        cm.accumulate(&m, &m).unwrap();
        assert_eq!(cm.iou_per_class()[2], None);
        assert_eq!(cm.f1_per_class()[2], None);
        assert_eq!(cm.miou(None), Some(1.0));
        assert_eq!(cm.mean_f1(None), Some(1.0));
    }

    #[test]
    fn zero_tp_with_errors_gives_zero_f1() {
        let mut cm = ConfusionMatrix::new(&names(2), None).unwrap();
        let reference = ClassMap::new(2, 1, vec![1, 0]).unwrap();
        let pred = ClassMap::new(2, 1, vec![0, 0]).unwrap();
        cm.accumulate(&pred, &reference).unwrap();
        // class 1: TP=0, FN=1 -> F1 = 0 by convention
        assert_eq!(cm.f1_per_class()[1], Some(0.0));
    }

    #[test]
    fn ignore_label_skips_pixels() {
        let mut cm = ConfusionMatrix::new(&names(2), Some(255)).unwrap();
        let reference = ClassMap::new(3, 1, vec![0, 255, 1]).unwrap();
        let pred = ClassMap::new(3, 1, vec![0, 1, 1]).unwrap();
        cm.accumulate(&pred, &reference).unwrap();
        assert_eq!(cm.total(), 2);
        assert_eq!(cm.overall_accuracy(), Some(1.0));
    }

    #[test]
    fn out_of_range_class_names_the_pixel() {
        let mut cm = ConfusionMatrix::new(&names(2), None).unwrap();
        let reference = ClassMap::new(2, 1, vec![0, 3]).unwrap();
        let pred = ClassMap::new(2, 1, vec![0, 0]).unwrap();
        let err = cm.accumulate(&pred, &reference).unwrap_err();
        assert!(err.to_string().contains("x=1"), "{err}");
    }

    #[test]
    fn report_formats() {
        let cm = hand_case();
        let rep = cm.report(None);
        assert!(rep.contains("oa=0.7000"), "{rep}");
        assert!(rep.contains("miou=0.5357"), "{rep}");
        assert!(rep.contains("70.00"), "{rep}");

        let empty = ConfusionMatrix::new(&names(2), None).unwrap();
        let rep = empty.report(None);
        assert!(rep.contains("no data"), "{rep}");
        assert!(!rep.contains("NaN"));
    }

    #[test]
    fn diagonal_report_is_all_hundred() {
        let mut cm = ConfusionMatrix::new(&names(2), None).unwrap();
        let m = ClassMap::new(4, 1, vec![0, 1, 0, 1]).unwrap();
        cm.accumulate(&m, &m).unwrap();
        let rep = cm.report(None);
        assert!(rep.contains("100.00"));
        assert!(rep.contains("oa=1.0000"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// Brute-force oracle: metrics straight from pixel loops, no matrix.
        fn brute_force(pred: &ClassMap, reference: &ClassMap, k: usize) -> (f64, Vec<Option<f64>>, Vec<Option<f64>>) {
            let n = pred.data().len();
            let correct = pred
                .data()
                .iter()
                .zip(reference.data())
                .filter(|(p, r)| p == r)
                .count();
            let oa = correct as f64 / n as f64;
            let mut iou = Vec::new();
            let mut f1 = Vec::new();
            for c in 0..k as u8 {
                let tp = (0..n)
                    .filter(|&i| pred.data()[i] == c && reference.data()[i] == c)
                    .count() as f64;
                let fp = (0..n)
                    .filter(|&i| pred.data()[i] == c && reference.data()[i] != c)
                    .count() as f64;
                let fneg = (0..n)
                    .filter(|&i| pred.data()[i] != c && reference.data()[i] == c)
                    .count() as f64;
                if tp + fp + fneg == 0.0 {
                    iou.push(None);
                    f1.push(None);
                } else {
                    iou.push(Some(tp / (tp + fp + fneg)));
                    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                    let r = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
                    f1.push(Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }));
                }
            }
            (oa, iou, f1)
        }

        fn class_map(k: u8, n: usize) -> impl Strategy<Value = Vec<u8>> {
            proptest::collection::vec(0..k, n)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(60))]

            #[test]
            fn matrix_metrics_equal_brute_force(
                pd in class_map(4, 32 * 32),
                rd in class_map(4, 32 * 32),
            ) {
                let pred = ClassMap::new(32, 32, pd).unwrap();
                let reference = ClassMap::new(32, 32, rd).unwrap();
                let mut cm = ConfusionMatrix::new(&names(4), None).unwrap();
                cm.accumulate(&pred, &reference).unwrap();
                let (oa, iou, f1) = brute_force(&pred, &reference, 4);
                prop_assert!((cm.overall_accuracy().unwrap() - oa).abs() < 1e-12);
                for c in 0..4 {
                    match (cm.iou_per_class()[c], iou[c]) {
                        (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                        (a, b) => prop_assert_eq!(a, b),
                    }
                    match (cm.f1_per_class()[c], f1[c]) {
                        (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                        (a, b) => prop_assert_eq!(a, b),
                    }
                }
                // all metrics live in [0, 1]
                for v in cm.iou_per_class().iter().chain(cm.f1_per_class().iter()).flatten() {
                    prop_assert!((0.0..=1.0).contains(v));
                }
            }

            #[test]
            fn label_permutation_invariance(
                pd in class_map(3, 64),
                rd in class_map(3, 64),
            ) {
                let perm = [2u8, 0, 1];
                let pred = ClassMap::new(8, 8, pd.clone()).unwrap();
                let reference = ClassMap::new(8, 8, rd.clone()).unwrap();
                let mut cm = ConfusionMatrix::new(&names(3), None).unwrap();
                cm.accumulate(&pred, &reference).unwrap();

                let pp = ClassMap::new(8, 8, pd.iter().map(|&v| perm[v as usize]).collect()).unwrap();
                let rp = ClassMap::new(8, 8, rd.iter().map(|&v| perm[v as usize]).collect()).unwrap();
                let mut cmp = ConfusionMatrix::new(&names(3), None).unwrap();
                cmp.accumulate(&pp, &rp).unwrap();

                // means sum classes in different orders, so compare to 1e-12
                prop_assert_eq!(cm.overall_accuracy(), cmp.overall_accuracy());
                let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
                    (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                    (a, b) => a == b,
                };
                prop_assert!(close(cm.miou(None), cmp.miou(None)));
                prop_assert!(close(cm.mean_f1(None), cmp.mean_f1(None)));
            }
        }
    }
}
