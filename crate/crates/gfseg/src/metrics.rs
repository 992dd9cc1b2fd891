//! Per-class IoU, base/novel mIoU, Mean, H-Mean and fold aggregation.
//!
//! Everything flows through a confusion matrix in channel space (rows =
//! ground truth, columns = prediction), so metrics are invariant to pixel
//! order and mergeable across workers. Values are reported in percent.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::ClassTaxonomy;
use crate::error::{Error, Result};

/// Pixel counts in channel space. `counts[t][p]` is the number of scored
/// pixels with ground-truth channel `t` predicted as channel `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(channels: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((channels, channels)),
        }
    }

    pub fn channels(&self) -> usize {
        self.counts.shape()[0]
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Merge another matrix into this one (per-worker accumulation).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.channels(), other.channels());
        self.counts += &other.counts;
    }
}

/// Accumulate one image's prediction. `pred` and `truth` are channel
/// indices per pixel; a negative truth marks an ignored pixel.
pub fn accumulate_confusion(
    pred: &[i32],
    truth: &[i32],
    cm: &mut ConfusionMatrix,
) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let c = cm.channels() as i32;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        if t < 0 {
            continue;
        }
        if t >= c || p < 0 || p >= c {
            return Err(Error::Data(format!(
                "channel out of range: truth {t}, pred {p}, {c} channels"
            )));
        }
        cm.counts[[t as usize, p as usize]] += 1;
    }
    Ok(())
}

/// Metrics of one evaluation run, in percent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// (class id, IoU%) for every class that appeared in GT or prediction.
    pub iou_per_class: Vec<(u8, f64)>,
    pub miou_base: f64,
    pub miou_novel: f64,
    pub mean_metric: f64,
    pub h_mean: f64,
    pub fold_index: usize,
    /// Class count behind `miou_base` (background included when grouped).
    pub base_class_count: usize,
    /// Class count behind `miou_novel`.
    pub novel_class_count: usize,
}

/// Harmonic mean of base and novel mIoU; 0 when both are 0.
pub fn h_mean(base: f64, novel: f64) -> f64 {
    if base + novel <= 0.0 {
        0.0
    } else {
        2.0 * base * novel / (base + novel)
    }
}

/// Class-count-weighted arithmetic mean of the two group mIoUs.
pub fn weighted_mean(base: f64, base_count: usize, novel: f64, novel_count: usize) -> f64 {
    let total = base_count + novel_count;
    if total == 0 {
        return 0.0;
    }
    (base * base_count as f64 + novel * novel_count as f64) / total as f64
}

/// Combine already-computed group mIoUs into (Mean, H-Mean) — also the path
/// for checking published table rows.
pub fn combine_group_means(
    miou_base: f64,
    base_count: usize,
    miou_novel: f64,
    novel_count: usize,
) -> (f64, f64) {
    (
        weighted_mean(miou_base, base_count, miou_novel, novel_count),
        h_mean(miou_base, miou_novel),
    )
}

/// Reduce a confusion matrix to the full metrics report.
///
/// IoU_i = tp / (gt + pred − tp). Classes absent from both ground truth and
/// prediction are excluded from the group averages. With
/// `group_background_with_base` (the default everywhere) the background
/// channel counts toward the base group, which matches how the base/novel
/// split is reported in the literature this follows.
pub fn compute_metrics(
    cm: &ConfusionMatrix,
    taxonomy: &ClassTaxonomy,
    fold_index: usize,
    group_background_with_base: bool,
) -> Result<MetricsReport> {
    let c = cm.channels();
    if cm.total() == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let expect = taxonomy.num_channels();
    let phase1 = 1 + taxonomy.num_base();
    if c != expect && c != phase1 {
        return Err(Error::Shape(format!(
            "confusion matrix has {c} channels; taxonomy defines {phase1} or {expect}"
        )));
    }
    let mut iou_per_class = Vec::new();
    let mut base_sum = 0.0;
    let mut base_n = 0usize;
    let mut novel_sum = 0.0;
    let mut novel_n = 0usize;
    for ch in 0..c {
        let tp = cm.counts[[ch, ch]] as f64;
        let gt: f64 = (0..c).map(|p| cm.counts[[ch, p]] as f64).sum();
        let pd: f64 = (0..c).map(|t| cm.counts[[t, ch]] as f64).sum();
        let denom = gt + pd - tp;
        if denom == 0.0 {
            continue; // absent from both GT and prediction
        }
        let iou = 100.0 * tp / denom;
        let class_id = taxonomy
            .class_of_channel(ch)
            .ok_or_else(|| Error::Shape(format!("channel {ch} has no class")))?;
        iou_per_class.push((class_id, iou));
        let is_background = ch == 0;
        let is_novel = ch > taxonomy.num_base();
        if is_novel {
            novel_sum += iou;
            novel_n += 1;
        } else if !is_background || group_background_with_base {
            base_sum += iou;
            base_n += 1;
        }
    }
    let miou_base = if base_n > 0 { base_sum / base_n as f64 } else { 0.0 };
    let miou_novel = if novel_n > 0 {
        novel_sum / novel_n as f64
    } else {
        0.0
    };
    let (mean_metric, h) = combine_group_means(miou_base, base_n, miou_novel, novel_n);
    Ok(MetricsReport {
        iou_per_class,
        miou_base,
        miou_novel,
        mean_metric,
        h_mean: h,
        fold_index,
        base_class_count: base_n,
        novel_class_count: novel_n,
    })
}

/// Outcome of one fold inside a cross-validation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FoldOutcome {
    Success(MetricsReport),
    Failed { fold_index: usize, message: String },
}

/// Per-fold results plus metrics aggregated over the successful folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValReport {
    pub folds: Vec<FoldOutcome>,
    pub aggregate: Option<MetricsReport>,
}

/// Run `run_fn` for each fold and aggregate: base and novel mIoU are
/// averaged across folds first, then Mean and H-Mean are computed from the
/// averaged values (not averaged per-fold). A failing fold is recorded and
/// excluded from the aggregate.
pub fn cross_validate(
    num_folds: usize,
    mut run_fn: impl FnMut(usize) -> Result<MetricsReport>,
) -> Result<CrossValReport> {
    if num_folds == 0 {
        return Err(Error::Config("cross-validation needs at least one fold".into()));
    }
    let mut folds = Vec::with_capacity(num_folds);
    for fold in 0..num_folds {
        match run_fn(fold) {
            Ok(report) => folds.push(FoldOutcome::Success(report)),
            Err(e) => folds.push(FoldOutcome::Failed {
                fold_index: fold,
                message: e.to_string(),
            }),
        }
    }
    let successes: Vec<&MetricsReport> = folds
        .iter()
        .filter_map(|f| match f {
            FoldOutcome::Success(r) => Some(r),
            FoldOutcome::Failed { .. } => None,
        })
        .collect();
    let aggregate = if successes.is_empty() {
        None
    } else {
        let n = successes.len() as f64;
        let base = successes.iter().map(|r| r.miou_base).sum::<f64>() / n;
        let novel = successes.iter().map(|r| r.miou_novel).sum::<f64>() / n;
        let base_count = successes[0].base_class_count;
        let novel_count = successes[0].novel_class_count;
        let (mean_metric, h) = combine_group_means(base, base_count, novel, novel_count);
        Some(MetricsReport {
            iou_per_class: Vec::new(),
            miou_base: base,
            miou_novel: novel,
            mean_metric,
            h_mean: h,
            fold_index: usize::MAX,
            base_class_count: base_count,
            novel_class_count: novel_count,
        })
    };
    Ok(CrossValReport { folds, aggregate })
}

/// Render a report in the table layout used throughout: Base | Novel |
/// Mean | H-Mean, two decimals.
pub fn report_table(label: &str, r: &MetricsReport) -> String {
    format!(
        "{label:<12}  Base {base:>6.2}  Novel {novel:>6.2}  Mean {mean:>6.2}  H-Mean {h:>6.2}",
        base = r.miou_base,
        novel = r.miou_novel,
        mean = r.mean_metric,
        h = r.h_mean
    )
}
