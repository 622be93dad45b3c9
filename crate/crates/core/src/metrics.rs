//! Pixel confusion counts, DSC / IoU / SE / SP and their mean ± sample
//! standard deviation per class and fold.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::data::LesionClass;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &Tensor, truth: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "confusion",
            format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (binary(p)?, binary(t)?);
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn binary(v: f64) -> Result<bool> {
    if v == 1.0 {
        Ok(true)
    } else if v == 0.0 {
        Ok(false)
    } else {
        Err(Error::Invalid(format!("mask value {v} is not 0 or 1")))
    }
}

/// `2tp/(2tp+fp+fn)`; 1 when both masks are empty.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / den as f64
    }
}

/// `tp/(tp+fp+fn)`; 1 when both masks are empty.
pub fn iou(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fp + c.fn_;
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

/// `tp/(tp+fn)`; 1 when the truth is empty.
pub fn se(c: &ConfusionCounts) -> f64 {
    let den = c.tp + c.fn_;
    if den == 0 {
        1.0
    } else {
        c.tp as f64 / den as f64
    }
}

/// `tn/(tn+fp)`; 1 when the truth covers every pixel.
pub fn sp(c: &ConfusionCounts) -> f64 {
    let den = c.tn + c.fp;
    if den == 0 {
        1.0
    } else {
        c.tn as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub fold: usize,
    pub class: LesionClass,
    pub dsc: f64,
    pub iou: f64,
    pub se: f64,
    pub sp: f64,
}

impl ImageRecord {
    pub fn from_masks(id: &str, fold: usize, class: LesionClass, pred: &Tensor, truth: &Tensor) -> Result<Self> {
        let c = confusion(pred, truth)?;
        Ok(Self {
            id: id.to_string(),
            fold,
            class,
            dsc: dsc(&c),
            iou: iou(&c),
            se: se(&c),
            sp: sp(&c),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassGroup {
    Class(LesionClass),
    All,
}

impl fmt::Display for ClassGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassGroup::Class(c) => write!(f, "{c}"),
            ClassGroup::All => f.write_str("all"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (`n − 1` denominator, 0 for `n = 1`).
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some(Summary { mean, std })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStats {
    pub count: usize,
    pub dsc: Summary,
    pub iou: Summary,
    pub se: Summary,
    pub sp: Summary,
}

fn group_stats(records: &[&ImageRecord]) -> Option<GroupStats> {
    let col = |f: fn(&ImageRecord) -> f64| records.iter().map(|r| f(r)).collect::<Vec<_>>();
    Some(GroupStats {
        count: records.len(),
        dsc: summarize(&col(|r| r.dsc))?,
        iou: summarize(&col(|r| r.iou))?,
        se: summarize(&col(|r| r.se))?,
        sp: summarize(&col(|r| r.sp))?,
    })
}

/// Per-image records plus aggregates. Groups with no records are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub records: Vec<ImageRecord>,
    /// Pooled over all folds.
    pub by_class: BTreeMap<ClassGroup, GroupStats>,
    pub by_fold: BTreeMap<(usize, ClassGroup), GroupStats>,
}

impl MetricsReport {
    pub fn overall(&self) -> Option<&GroupStats> {
        self.by_class.get(&ClassGroup::All)
    }

    pub fn mean_dsc(&self) -> f64 {
        self.overall().map_or(f64::NAN, |g| g.dsc.mean)
    }
}

/// Groups records by class (benign, malignant, optionally normal, all) and
/// by fold × class. Normal-class records are dropped unless
/// `include_normal` is set.
pub fn aggregate(records: Vec<ImageRecord>, include_normal: bool) -> MetricsReport {
    let records: Vec<ImageRecord> = records
        .into_iter()
        .filter(|r| include_normal || r.class != LesionClass::Normal)
        .collect();
    let mut groups: BTreeMap<ClassGroup, Vec<&ImageRecord>> = BTreeMap::new();
    let mut fold_groups: BTreeMap<(usize, ClassGroup), Vec<&ImageRecord>> = BTreeMap::new();
    for r in &records {
        for g in [ClassGroup::Class(r.class), ClassGroup::All] {
            groups.entry(g).or_default().push(r);
            fold_groups.entry((r.fold, g)).or_default().push(r);
        }
    }
    let by_class = groups
        .iter()
        .filter_map(|(g, rs)| group_stats(rs).map(|s| (*g, s)))
        .collect();
    let by_fold = fold_groups
        .iter()
        .filter_map(|(g, rs)| group_stats(rs).map(|s| (*g, s)))
        .collect();
    MetricsReport {
        records,
        by_class,
        by_fold,
    }
}

/// CSV with columns `id, fold, class, dsc, iou, se, sp`: one row per
/// image, then `mean`/`std` rows per fold × class and per class over all
/// folds (fold column `all`).
pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("id,fold,class,dsc,iou,se,sp\n");
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            csv_field(&r.id),
            r.fold,
            r.class,
            r.dsc,
            r.iou,
            r.se,
            r.sp
        ));
    }
    let mut push = |fold: String, group: ClassGroup, s: &GroupStats| {
        for (label, pick) in [("mean", true), ("std", false)] {
            let v = |x: Summary| if pick { x.mean } else { x.std };
            out.push_str(&format!(
                "{label},{fold},{group},{},{},{},{}\n",
                v(s.dsc),
                v(s.iou),
                v(s.se),
                v(s.sp)
            ));
        }
    };
    for ((fold, group), s) in &report.by_fold {
        push(fold.to_string(), *group, s);
    }
    for (group, s) in &report.by_class {
        push("all".into(), *group, s);
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    std::fs::write(path, report_csv(report)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn formula_values() {
        let c = counts(3, 1, 1, 11);
        assert_eq!(dsc(&c), 0.75);
        assert_eq!(iou(&c), 0.6);
        assert!((dsc(&c) - 2.0 * iou(&c) / (1.0 + iou(&c))).abs() < 1e-15);
        assert_eq!(se(&c), 0.75);
        assert_eq!(sp(&c), 11.0 / 12.0);
    }

    #[test]
    fn degenerate_conventions() {
        let empty = counts(0, 0, 0, 16);
        assert_eq!((dsc(&empty), iou(&empty), se(&empty), sp(&empty)), (1.0, 1.0, 1.0, 1.0));
        let spurious = counts(0, 3, 0, 13);
        assert_eq!((dsc(&spurious), iou(&spurious)), (0.0, 0.0));
        assert_eq!(sp(&counts(4, 0, 0, 0)), 1.0);
    }

    #[test]
    fn identity_and_complement() {
        let truth = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let c = confusion(&truth, &truth).unwrap();
        assert_eq!(c, counts(6, 0, 0, 10));
        let inv = truth.map(|v| 1.0 - v);
        let c = confusion(&inv, &truth).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&truth, &Tensor::zeros(&[1, 1, 4, 3])).is_err());
    }

    fn record(id: &str, fold: usize, class: LesionClass, d: f64) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            fold,
            class,
            dsc: d,
            iou: d,
            se: d,
            sp: d,
        }
    }

    #[test]
    fn aggregation() {
        let one = aggregate(vec![record("a", 0, LesionClass::Benign, 0.8)], false);
        let s = one.by_class[&ClassGroup::All];
        assert_eq!((s.dsc.mean, s.dsc.std), (0.8, 0.0));
        assert!(!one.by_class.contains_key(&ClassGroup::Class(LesionClass::Malignant)));

        let two = aggregate(
            vec![
                record("a", 0, LesionClass::Benign, 0.8),
                record("b", 1, LesionClass::Malignant, 0.9),
                record("n", 1, LesionClass::Normal, 0.0),
            ],
            false,
        );
        let all = two.by_class[&ClassGroup::All];
        assert_eq!(all.count, 2);
        assert!((all.dsc.mean - 0.85).abs() < 1e-15);
        assert!((all.dsc.std - 0.0707106781).abs() < 1e-9);
        let mut records = two.records.clone();
        records.push(record("n", 1, LesionClass::Normal, 0.0));
        let with_normal = aggregate(records, true);
        assert_eq!(with_normal.by_class[&ClassGroup::All].count, 3);
        assert_eq!(with_normal.by_fold[&(1, ClassGroup::All)].count, 2);
    }

    #[test]
    fn csv_layout() {
        let r = aggregate(vec![record("x,y", 2, LesionClass::Benign, 0.5)], false);
        let csv = report_csv(&r);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("id,fold,class,dsc,iou,se,sp"));
        assert_eq!(lines.next(), Some("\"x,y\",2,benign,0.5,0.5,0.5,0.5"));
        assert!(csv.contains("mean,all,all,0.5,0.5,0.5,0.5"));
    }
}
