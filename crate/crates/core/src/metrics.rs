//! Pixel-level localization metrics and their aggregation.
//!
//! F1 and IOU threshold probabilities with `>=`. AUC is the rank statistic
//! `P(score(pos) > score(neg)) + 0.5 P(tie)`. Scores are averaged per image,
//! then per dataset.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::BinaryMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_probs(pred: &[f32], gt: &BinaryMask, threshold: f64) -> Result<Self> {
        check_len(pred.len(), gt)?;
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt.data()) {
            match (p as f64 >= threshold, g == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn from_masks(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        let p: Vec<f32> = pred.data().iter().map(|&v| v as f32).collect();
        Self::from_probs(&p, gt, 0.5)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2tp / (2tp + fp + fn)`, 0 when the denominator vanishes.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }

    /// `tp / (tp + fp + fn)`, 0 on an empty union.
    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            0.0
        } else {
            self.tp as f64 / d as f64
        }
    }
}

fn check_len(n: usize, gt: &BinaryMask) -> Result<()> {
    if n != gt.data().len() {
        return Err(Error::ShapeMismatch {
            expected: vec![gt.height(), gt.width()],
            got: vec![n],
        });
    }
    Ok(())
}

pub fn pixel_f1(pred: &[f32], gt: &BinaryMask, threshold: f64) -> Result<f64> {
    Ok(ConfusionCounts::from_probs(pred, gt, threshold)?.f1())
}

pub fn pixel_iou(pred: &[f32], gt: &BinaryMask, threshold: f64) -> Result<f64> {
    Ok(ConfusionCounts::from_probs(pred, gt, threshold)?.iou())
}

/// ROC AUC via average ranks (Mann-Whitney U), ties counted as one half.
pub fn pixel_auc(pred: &[f32], gt: &BinaryMask) -> Result<f64> {
    check_len(pred.len(), gt)?;
    let pos = gt.count_ones() as f64;
    let neg = pred.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pred[order[j + 1]] == pred[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if gt.data()[k] == 1 {
                rank_sum_pos += mean_rank;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum_pos - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// One metric value for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub dataset: String,
    pub image_id: String,
    /// `None` where the metric is undefined (AUC on single-class ground truth).
    pub value: Option<f64>,
}

/// Per-image F1, IOU and AUC for one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub dataset: String,
    pub image_id: String,
    pub f1: f64,
    pub iou: f64,
    pub auc: Option<f64>,
}

impl ImageScores {
    pub fn compute(dataset: &str, image_id: &str, probs: &[f32], gt: &BinaryMask, threshold: f64) -> Result<Self> {
        let c = ConfusionCounts::from_probs(probs, gt, threshold)?;
        let auc = match pixel_auc(probs, gt) {
            Ok(a) => Some(a),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            dataset: dataset.to_string(),
            image_id: image_id.to_string(),
            f1: c.f1(),
            iou: c.iou(),
            auc,
        })
    }

    fn records(&self) -> [MetricRecord; 3] {
        let r = |metric: &str, value| MetricRecord {
            metric: metric.into(),
            dataset: self.dataset.clone(),
            image_id: self.image_id.clone(),
            value,
        };
        [r("f1", Some(self.f1)), r("iou", Some(self.iou)), r("auc", self.auc)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dataset: String,
    pub images: usize,
    pub f1: f64,
    pub iou: f64,
    /// Mean over images where AUC is defined.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summaries: Vec<DatasetSummary>,
    pub per_image: Vec<ImageScores>,
}

pub const REPORT_NOTE: &str =
    "per-image metrics averaged over images (not pooled over pixels); threshold comparison is >=";

/// Arithmetic mean of each metric per dataset; per-image values are kept.
pub fn aggregate(per_image: &[ImageScores]) -> Result<EvalReport> {
    if per_image.is_empty() {
        return Err(Error::Empty("no per-image scores to aggregate".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&ImageScores>> = BTreeMap::new();
    for s in per_image {
        groups.entry(&s.dataset).or_default().push(s);
    }
    let summaries = groups
        .into_iter()
        .map(|(name, rows)| {
            let n = rows.len() as f64;
            let aucs: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
            DatasetSummary {
                dataset: name.to_string(),
                images: rows.len(),
                f1: rows.iter().map(|r| r.f1).sum::<f64>() / n,
                iou: rows.iter().map(|r| r.iou).sum::<f64>() / n,
                auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
            }
        })
        .collect();
    Ok(EvalReport {
        summaries,
        per_image: per_image.to_vec(),
    })
}

impl EvalReport {
    /// Text table: header note, column names, one row per dataset.
    pub fn to_table(&self) -> String {
        let mut out = format!("# {REPORT_NOTE}\n");
        out.push_str(&format!(
            "{:<24} {:>7} {:>8} {:>8} {:>8}\n",
            "dataset", "images", "F1", "IOU", "AUC"
        ));
        for s in &self.summaries {
            let auc = s
                .auc
                .map(|a| format!("{a:.6}"))
                .unwrap_or_else(|| "n/a".into());
            out.push_str(&format!(
                "{:<24} {:>7} {:>8.6} {:>8.6} {:>8}\n",
                s.dataset, s.images, s.f1, s.iou, auc
            ));
        }
        out
    }

    /// Line-delimited JSON records `(metric, dataset, image_id, value)`.
    pub fn records(&self) -> Vec<MetricRecord> {
        self.per_image.iter().flat_map(|s| s.records()).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let table = dir.join("report.txt");
        std::fs::write(&table, self.to_table()).map_err(|e| Error::io(&table, e))?;
        let path = dir.join("records.jsonl");
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in self.records() {
            let line = serde_json::to_string(&r).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        let summary = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&self.summaries).expect("summary serializes");
        std::fs::write(&summary, text).map_err(|e| Error::io(&summary, e))?;
        Ok(())
    }
}
