//! Confusion-matrix metrics, RMSE and metric reports.

use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K×K` counts, rows = truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
            ignored: 0,
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds `preds` against `targets`, skipping targets equal to `ignore`.
    pub fn accumulate(&mut self, preds: &[i64], targets: &[i64], ignore: Option<i64>) -> Result<()> {
        if preds.len() != targets.len() {
            return Err(Error::shape("confusion", format!("{} predictions for {} targets", preds.len(), targets.len())));
        }
        let k = self.k as i64;
        for (&p, &t) in preds.iter().zip(targets) {
            if Some(t) == ignore {
                self.ignored += 1;
                continue;
            }
            if !(0..k).contains(&t) {
                return Err(Error::Data(format!("target {t} outside 0..{k}")));
            }
            if !(0..k).contains(&p) {
                return Err(Error::Data(format!("prediction {p} outside 0..{k}")));
            }
            self.counts[(t * k + p) as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("confusion", format!("merging {}x{} into {}x{}", other.k, other.k, self.k, self.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    fn fp(&self, c: usize) -> u64 {
        (0..self.k).filter(|&t| t != c).map(|t| self.get(t, c)).sum()
    }

    fn fn_(&self, c: usize) -> u64 {
        (0..self.k).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    /// Per-class IoU in percent; 100 for a class absent from truth and
    /// prediction.
    pub fn iou(&self, c: usize) -> f64 {
        ratio(self.tp(c), self.tp(c) + self.fp(c) + self.fn_(c))
    }

    /// Per-class F1 in percent; 100 for a class absent from truth and
    /// prediction.
    pub fn f1(&self, c: usize) -> f64 {
        ratio(2 * self.tp(c), 2 * self.tp(c) + self.fp(c) + self.fn_(c))
    }

    /// False-positive rate of class `c` over truth negatives, in percent.
    pub fn fp_rate(&self, c: usize) -> f64 {
        let fp = self.fp(c);
        let tn = self.total() - self.tp(c) - fp - self.fn_(c);
        if fp + tn == 0 {
            0.0
        } else {
            100.0 * fp as f64 / (fp + tn) as f64
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        100.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn accumulate_confusion(preds: &[i64], targets: &[i64], k: usize, ignore: Option<i64>) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(preds, targets, ignore)?;
    Ok(cm)
}

/// Named metric values; everything but `RMSE` is a percentage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metrics: IndexMap<String, f64>,
}

impl MetricReport {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            metrics: IndexMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn insert(&mut self, name: impl Into<String>, v: f64) {
        self.metrics.insert(name.into(), v);
    }

    pub fn validate(&self) -> Result<()> {
        for (name, &v) in &self.metrics {
            let ok = if name == RMSE { v >= 0.0 } else { (0.0..=100.0).contains(&v) };
            if !ok || !v.is_finite() {
                return Err(Error::Data(format!("{name} = {v} out of range")));
            }
        }
        Ok(())
    }
}

pub const RMSE: &str = "RMSE";

/// Binary classification: accuracy, F1 of class 1, false-positive rate.
pub fn classification_metrics(task: &str, cm: &ConfusionMatrix) -> Result<MetricReport> {
    if cm.k != 2 {
        return Err(Error::Data(format!("classification metrics need 2 classes, got {}", cm.k)));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let mut r = MetricReport::new(task);
    r.insert("Acc", 100.0 * (cm.get(0, 0) + cm.get(1, 1)) as f64 / total as f64);
    r.insert("FP", cm.fp_rate(1));
    r.insert("F1", cm.f1(1));
    Ok(r)
}

/// Segmentation: mIoU, mF1, OA, FP rate of class 1, then per-class IoU/F1.
pub fn segmentation_metrics(task: &str, cm: &ConfusionMatrix) -> Result<MetricReport> {
    if cm.k < 2 {
        return Err(Error::Data("segmentation metrics need at least 2 classes".into()));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let k = cm.k as f64;
    let mut r = MetricReport::new(task);
    r.insert("mIoU", (0..cm.k).map(|c| cm.iou(c)).sum::<f64>() / k);
    r.insert("mF1", (0..cm.k).map(|c| cm.f1(c)).sum::<f64>() / k);
    r.insert("OA", 100.0 * (0..cm.k).map(|c| cm.get(c, c)).sum::<u64>() as f64 / total as f64);
    r.insert("FP", cm.fp_rate(1));
    for c in 0..cm.k {
        r.insert(format!("IoU_{c}"), cm.iou(c));
        r.insert(format!("F1_{c}"), cm.f1(c));
    }
    Ok(r)
}

/// Per-image RMSE over non-zero targets, averaged over images with at
/// least one valid pixel.
pub fn rmse_metric(preds: &[&[f64]], targets: &[&[f64]]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::shape("rmse", format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let mut per_image = Vec::new();
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::shape("rmse", format!("image of {} predictions for {} targets", p.len(), t.len())));
        }
        let (sq, n) = p
            .iter()
            .zip(t.iter())
            .filter(|(_, &t)| t != 0.0)
            .fold((0.0, 0usize), |(s, n), (p, t)| (s + (p - t) * (p - t), n + 1));
        if n > 0 {
            per_image.push((sq / n as f64).sqrt());
        }
    }
    if per_image.is_empty() {
        return Err(Error::Data("no image has a non-zero target".into()));
    }
    Ok(per_image.iter().sum::<f64>() / per_image.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub metric: String,
    pub source: f64,
    pub target: f64,
    /// `target − source`: negative is a degradation except for FP and RMSE.
    pub delta: f64,
}

pub fn domain_gap_report(source: &MetricReport, target: &MetricReport) -> Result<Vec<GapRow>> {
    if source.task != target.task {
        return Err(Error::Data(format!("comparing {} with {}", source.task, target.task)));
    }
    let a: Vec<&String> = source.metrics.keys().collect();
    let b: Vec<&String> = target.metrics.keys().collect();
    if a != b {
        return Err(Error::Data(format!("metric sets differ: {a:?} vs {b:?}")));
    }
    Ok(source
        .metrics
        .iter()
        .map(|(name, &s)| {
            let t = target.metrics[name];
            GapRow {
                metric: name.clone(),
                source: s,
                target: t,
                delta: t - s,
            }
        })
        .collect())
}

/// Columns of the metrics CSV after `task,environment,precision`.
pub const CSV_METRICS: [&str; 9] = ["Acc", "FP", "F1", "mIoU", "mF1", "OA", "IoU_1", "F1_1", RMSE];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub environment: String,
    pub precision: String,
    pub report: MetricReport,
}

/// One row per (task, environment, precision); metrics a task does not
/// report stay empty.
pub fn write_metrics_csv(rows: &[MetricRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "task,environment,precision,{}", CSV_METRICS.join(","))?;
    for r in rows {
        let cells: Vec<String> = CSV_METRICS
            .iter()
            .map(|m| r.report.get(m).map(|v| format!("{v:.4}")).unwrap_or_default())
            .collect();
        writeln!(w, "{},{},{},{}", r.report.task, r.environment, r.precision, cells.join(","))?;
    }
    Ok(())
}

pub fn write_gap_csv(rows: &[GapRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "metric,source,target,delta")?;
    for r in rows {
        writeln!(w, "{},{:.4},{:.4},{:.4}", r.metric, r.source, r.target, r.delta)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let cm = accumulate_confusion(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, None).unwrap();
        assert_eq!(cm.counts, vec![1, 1, 0, 2]);
        let diag = accumulate_confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3, None).unwrap();
        assert_eq!(diag.counts, vec![1, 0, 0, 0, 2, 0, 0, 0, 1]);
        let ig = accumulate_confusion(&[0, 1, 1], &[-1, -1, -1], 2, Some(-1)).unwrap();
        assert_eq!((ig.total(), ig.ignored), (0, 3));
        assert!(accumulate_confusion(&[2], &[0], 2, None).is_err());
    }

    #[test]
    fn classification_examples() {
        let perfect = accumulate_confusion(&[0, 1, 1], &[0, 1, 1], 2, None).unwrap();
        let r = classification_metrics("c", &perfect).unwrap();
        assert_eq!((r.get("Acc"), r.get("FP"), r.get("F1")), (Some(100.0), Some(0.0), Some(100.0)));
        // TP=3, FP=1, FN=1, TN=5
        let mut preds = vec![1, 1, 1, 1, 0];
        let mut truth = vec![1, 1, 1, 0, 1];
        preds.extend([0; 5]);
        truth.extend([0; 5]);
        let r = classification_metrics("c", &accumulate_confusion(&preds, &truth, 2, None).unwrap()).unwrap();
        assert_eq!(r.get("Acc"), Some(80.0));
        assert_eq!(r.get("F1"), Some(75.0));
        assert!((r.get("FP").unwrap() - 100.0 / 6.0).abs() < 1e-12);
        let none = accumulate_confusion(&[0, 0], &[0, 0], 2, None).unwrap();
        assert_eq!(classification_metrics("c", &none).unwrap().get("F1"), Some(100.0));
        assert!(classification_metrics("c", &ConfusionMatrix::new(2)).is_err());
    }

    #[test]
    fn segmentation_examples() {
        let cm = accumulate_confusion(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, None).unwrap();
        let r = segmentation_metrics("s", &cm).unwrap();
        assert_eq!(r.get("IoU_0"), Some(50.0));
        assert!((r.get("IoU_1").unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!((r.get("mIoU").unwrap() - 175.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.get("OA"), Some(75.0));
        let perfect = accumulate_confusion(&[0, 1], &[0, 1], 2, None).unwrap();
        assert!(segmentation_metrics("s", &perfect).unwrap().metrics.iter().all(|(n, &v)| v == if n == "FP" { 0.0 } else { 100.0 }));
        let absent = accumulate_confusion(&[0, 0], &[0, 0], 3, None).unwrap();
        assert_eq!(segmentation_metrics("s", &absent).unwrap().get("IoU_2"), Some(100.0));
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse_metric(&[&[1.0, 2.0]], &[&[1.0, 2.0]]).unwrap(), 0.0);
        assert!((rmse_metric(&[&[0.0, 9.0, 0.0]], &[&[3.0, 0.0, 4.0]]).unwrap() - 12.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(rmse_metric(&[&[2.0], &[4.0]], &[&[1.0], &[1.0]]).unwrap(), 2.0);
        assert_eq!(rmse_metric(&[&[2.0], &[7.0]], &[&[1.0], &[0.0]]).unwrap(), 1.0);
        assert!(rmse_metric(&[&[2.0]], &[&[0.0]]).is_err());
    }

    #[test]
    fn gap_examples() {
        let mut src = MetricReport::new("cloud-classification");
        src.insert("Acc", 97.0);
        src.insert("F1", 95.0);
        let mut tgt = MetricReport::new("cloud-classification");
        tgt.insert("Acc", 48.8);
        tgt.insert("F1", 55.1);
        let rows = domain_gap_report(&src, &tgt).unwrap();
        assert!((rows[0].delta + 48.2).abs() < 1e-9);
        assert!((rows[1].delta + 39.9).abs() < 1e-9);
        assert!(domain_gap_report(&src, &src).unwrap().iter().all(|r| r.delta == 0.0));
        let back = domain_gap_report(&tgt, &src).unwrap();
        assert!(rows.iter().zip(&back).all(|(a, b)| a.delta == -b.delta));
        let mut other = src.clone();
        other.insert("FP", 1.0);
        assert!(domain_gap_report(&src, &other).is_err());
    }

    #[test]
    fn csv_layout() {
        let cm = accumulate_confusion(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, None).unwrap();
        let rows = vec![MetricRow {
            environment: "workstation".into(),
            precision: "FP32".into(),
            report: segmentation_metrics("flood", &cm).unwrap(),
        }];
        let mut out = Vec::new();
        write_metrics_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), "task,environment,precision,Acc,FP,F1,mIoU,mF1,OA,IoU_1,F1_1,RMSE");
        assert_eq!(text.lines().nth(1).unwrap(), "flood,workstation,FP32,,50.0000,,58.3333,73.3333,75.0000,66.6667,80.0000,");
    }

    /// Per-pixel recount straight from the definitions.
    fn brute(preds: &[i64], truth: &[i64], k: usize) -> (Vec<f64>, f64) {
        let ious = (0..k as i64)
            .map(|c| {
                let inter = preds.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count();
                let union = preds.iter().zip(truth).filter(|(p, t)| **p == c || **t == c).count();
                if union == 0 { 100.0 } else { 100.0 * inter as f64 / union as f64 }
            })
            .collect();
        let oa = 100.0 * preds.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / preds.len() as f64;
        (ious, oa)
    }

    proptest! {
        #[test]
        fn matches_brute_force_on_8x8(seed in any::<u64>(), k in 2usize..4) {
            let mut rng = RngStream::new(seed, "m");
            let truth: Vec<i64> = (0..64).map(|_| rng.below(k) as i64).collect();
            let preds: Vec<i64> = (0..64).map(|_| rng.below(k) as i64).collect();
            let cm = accumulate_confusion(&preds, &truth, k, None).unwrap();
            let r = segmentation_metrics("s", &cm).unwrap();
            let (ious, oa) = brute(&preds, &truth, k);
            for (c, iou) in ious.iter().enumerate() {
                prop_assert_eq!(r.get(&format!("IoU_{c}")).unwrap(), *iou);
                let f1 = r.get(&format!("F1_{c}")).unwrap();
                prop_assert!(0.0 <= *iou && *iou <= f1 && f1 <= 100.0);
            }
            prop_assert_eq!(r.get("OA").unwrap(), oa);
            prop_assert_eq!(cm.total() + cm.ignored, 64);
        }

        #[test]
        fn miou_is_permutation_invariant(seed in any::<u64>()) {
            let mut rng = RngStream::new(seed, "p");
            let truth: Vec<i64> = (0..64).map(|_| rng.below(3) as i64).collect();
            let preds: Vec<i64> = (0..64).map(|_| rng.below(3) as i64).collect();
            let perm = rng.permutation(3);
            let map = |v: &[i64]| v.iter().map(|&x| perm[x as usize] as i64).collect::<Vec<_>>();
            let a = segmentation_metrics("s", &accumulate_confusion(&preds, &truth, 3, None).unwrap()).unwrap();
            let b = segmentation_metrics("s", &accumulate_confusion(&map(&preds), &map(&truth), 3, None).unwrap()).unwrap();
            prop_assert!((a.get("mIoU").unwrap() - b.get("mIoU").unwrap()).abs() < 1e-9);
        }

        #[test]
        fn merge_is_commutative(seed in any::<u64>()) {
            let mut rng = RngStream::new(seed, "merge");
            let v: Vec<i64> = (0..40).map(|_| rng.below(2) as i64).collect();
            let a = accumulate_confusion(&v[..20], &v[20..], 2, None).unwrap();
            let b = accumulate_confusion(&v[20..], &v[..20], 2, None).unwrap();
            let mut ab = a.clone();
            ab.merge(&b).unwrap();
            let mut ba = b.clone();
            ba.merge(&a).unwrap();
            prop_assert_eq!(ab, ba);
        }
    }
}
