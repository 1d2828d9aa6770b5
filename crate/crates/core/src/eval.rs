//! Classification and localization metrics, confusion analysis, the
//! evaluation report and the shared-versus-separate pathway benchmark.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{pseudo_boxes_batch, BBox};
use crate::backbone::CAM_LEVEL;
use crate::error::{Result, WsdlError};
use crate::heads::Prediction;
use crate::pipeline::{Dln, TrainedModel};
use crate::rpn::iou;
use crate::synthdata::{images_to_tensor, EvalAnnotations, LabeledImage, RgbImage};

/// IoU a predicted box must exceed to count as a correct localization.
pub const LOCALIZATION_IOU: f64 = 0.5;
/// Confused pairs listed in the report.
pub const TOP_CONFUSED: usize = 5;
pub const BENCH_REPEATS: usize = 5;
pub const BENCH_MIN_IMAGES: usize = 100;
/// Images run once before timing starts.
pub const BENCH_WARMUP: usize = 10;

/// Test images per MAEN forward batch when computing pseudo-boxes.
const MAEN_CHUNK: usize = 50;

fn check_aligned(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(WsdlError::shape(op, format!("{a} predictions vs {b} references")));
    }
    Ok(())
}

/// Number of predictions equal to their label.
pub fn correct_count(predictions: &[usize], labels: &[usize]) -> Result<usize> {
    check_aligned("accuracy", predictions.len(), labels.len())?;
    Ok(predictions.iter().zip(labels).filter(|(p, l)| p == l).count())
}

/// Fraction of correctly classified samples.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(WsdlError::Invalid("accuracy of an empty set".into()));
    }
    Ok(correct_count(predictions, labels)? as f64 / labels.len() as f64)
}

/// Fraction of predicted boxes whose IoU with the reference strictly exceeds `thresh`.
pub fn localization_accuracy(pred: &[BBox], gt: &[BBox], thresh: f64) -> Result<f64> {
    check_aligned("localization_accuracy", pred.len(), gt.len())?;
    if gt.is_empty() {
        return Err(WsdlError::Invalid("localization accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| iou(p, g) > thresh).count();
    Ok(hits as f64 / gt.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PclReport {
    pub per_part: Vec<f64>,
    pub average: f64,
}

/// Per-part fraction of part points inside the predicted box (half-open),
/// and the mean over parts.
pub fn pcl(pred: &[BBox], parts: &[Vec<(f64, f64)>]) -> Result<PclReport> {
    check_aligned("pcl", pred.len(), parts.len())?;
    let k = parts.first().map(Vec::len).unwrap_or(0);
    if pred.is_empty() || k == 0 || parts.iter().any(|p| p.len() != k) {
        return Err(WsdlError::Invalid(
            "pcl needs a non-empty set with equal part counts".into(),
        ));
    }
    let per_part: Vec<f64> = (0..k)
        .map(|j| {
            let hits = pred
                .iter()
                .zip(parts)
                .filter(|(b, p)| b.contains(p[j].0, p[j].1))
                .count();
            hits as f64 / pred.len() as f64
        })
        .collect();
    let average = per_part.iter().sum::<f64>() / k as f64;
    Ok(PclReport { per_part, average })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusedPair {
    pub actual: usize,
    pub predicted: usize,
    pub count: usize,
}

/// `counts[i][j]` is the number of samples of class `i` predicted as `j`.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    check_aligned("confusion_matrix", predictions.len(), labels.len())?;
    let mut counts = vec![vec![0; classes]; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        for v in [p, l] {
            if v >= classes {
                return Err(WsdlError::LabelOutOfRange { label: v, classes });
            }
        }
        counts[l][p] += 1;
    }
    Ok(counts)
}

/// Off-diagonal cells with non-zero counts, largest first, at most `k`.
/// Ties go to the lower (actual, predicted) pair.
pub fn top_confused(counts: &[Vec<usize>], k: usize) -> Vec<ConfusedPair> {
    let mut pairs: Vec<ConfusedPair> = counts
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(move |&(j, &c)| j != i && c > 0)
                .map(move |(j, &c)| ConfusedPair {
                    actual: i,
                    predicted: j,
                    count: c,
                })
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then((a.actual, a.predicted).cmp(&(b.actual, b.predicted)))
    });
    pairs.truncate(k);
    pairs
}

/// Per-level results for one head of the trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: String,
    /// This head's region scores fused with its own whole-image scores.
    pub accuracy: f64,
    pub localization_accuracy: f64,
    /// The MAEN pseudo-box for this level, used directly as the prediction.
    pub maen_localization_accuracy: f64,
    pub pcl: PclReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Level whose boxes give the headline localization and PCL figures.
    pub localization_level: String,
    pub localization_accuracy: f64,
    pub maen_localization_accuracy: f64,
    pub pcl: PclReport,
    pub levels: Vec<LevelReport>,
    pub confusion: Vec<Vec<usize>>,
    pub top_confused: Vec<ConfusedPair>,
    /// Filled by the benchmark only; evaluation leaves it empty so reports
    /// from identical runs compare equal.
    #[serde(default)]
    pub timing: Vec<BenchResult>,
}

/// The cam level when configured, otherwise the last level.
pub fn localization_level(levels: &[String]) -> Option<&String> {
    levels.iter().find(|l| l.as_str() == CAM_LEVEL).or(levels.last())
}

/// Assemble a report from network predictions, ground truth and the MAEN
/// pseudo-boxes of the same images.
pub fn build_report(
    predictions: &[Prediction],
    labels: &[usize],
    truth: &[EvalAnnotations],
    maen_boxes: &[Vec<(String, BBox)>],
    levels: &[String],
    classes: usize,
) -> Result<EvalReport> {
    check_aligned("build_report", predictions.len(), labels.len())?;
    check_aligned("build_report", predictions.len(), truth.len())?;
    check_aligned("build_report", predictions.len(), maen_boxes.len())?;
    let classes_pred: Vec<usize> = predictions.iter().map(|p| p.class).collect();
    let correct = correct_count(&classes_pred, labels)?;
    let acc = accuracy(&classes_pred, labels)?;
    let gt: Vec<BBox> = truth.iter().map(|a| a.object).collect();
    let parts: Vec<Vec<(f64, f64)>> = truth.iter().map(|a| a.parts.clone()).collect();
    let mut level_reports = Vec::with_capacity(levels.len());
    for (li, level) in levels.iter().enumerate() {
        let mut boxes = Vec::with_capacity(predictions.len());
        let mut single = Vec::with_capacity(predictions.len());
        for p in predictions {
            let lp = p
                .levels
                .get(li)
                .filter(|lp| &lp.level == level)
                .ok_or_else(|| WsdlError::Invalid(format!("prediction lacks level {level:?}")))?;
            boxes.push(lp.bbox);
            single.push(lp.single_level()?.1);
        }
        let maen: Vec<BBox> = maen_boxes
            .iter()
            .map(|m| {
                m.iter()
                    .find(|(l, _)| l == level)
                    .map(|(_, b)| *b)
                    .ok_or_else(|| WsdlError::Invalid(format!("no pseudo-box for level {level:?}")))
            })
            .collect::<Result<_>>()?;
        level_reports.push(LevelReport {
            level: level.clone(),
            accuracy: accuracy(&single, labels)?,
            localization_accuracy: localization_accuracy(&boxes, &gt, LOCALIZATION_IOU)?,
            maen_localization_accuracy: localization_accuracy(&maen, &gt, LOCALIZATION_IOU)?,
            pcl: pcl(&boxes, &parts)?,
        });
    }
    let headline_level = localization_level(levels).ok_or_else(|| WsdlError::Invalid("no levels".into()))?;
    let headline = level_reports
        .iter()
        .find(|r| &r.level == headline_level)
        .cloned()
        .ok_or_else(|| WsdlError::Invalid("no headline level".into()))?;
    let confusion = confusion_matrix(&classes_pred, labels, classes)?;
    Ok(EvalReport {
        count: labels.len(),
        correct,
        accuracy: acc,
        localization_level: headline.level,
        localization_accuracy: headline.localization_accuracy,
        maen_localization_accuracy: headline.maen_localization_accuracy,
        pcl: headline.pcl,
        levels: level_reports,
        top_confused: top_confused(&confusion, TOP_CONFUSED),
        confusion,
        timing: Vec::new(),
    })
}

/// MAEN pseudo-boxes for every image, computed in fixed-size chunks.
pub fn maen_boxes(model: &TrainedModel, images: &[RgbImage]) -> Result<Vec<Vec<(String, BBox)>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(MAEN_CHUNK) {
        let t = images_to_tensor(chunk.iter());
        out.extend(pseudo_boxes_batch(&t, &model.maen.params, &model.config.backbone)?);
    }
    Ok(out)
}

/// Run the trained network over a labeled split and score it against the
/// evaluation annotations, keyed by image name.
pub fn evaluate(
    model: &TrainedModel,
    samples: &[LabeledImage],
    annotations: &BTreeMap<String, EvalAnnotations>,
    threads: usize,
) -> Result<EvalReport> {
    let truth: Vec<EvalAnnotations> = samples
        .iter()
        .map(|s| {
            annotations
                .get(&s.name)
                .cloned()
                .ok_or_else(|| WsdlError::Invalid(format!("no annotation for {}", s.name)))
        })
        .collect::<Result<_>>()?;
    let images: Vec<RgbImage> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let dln = model.dln();
    let predictions = dln.infer_batch(&images, threads)?;
    let maen = maen_boxes(model, &images)?;
    build_report(
        &predictions,
        &labels,
        &truth,
        &maen,
        dln.levels(),
        model.config.heads.num_classes,
    )
}

/// Confusion matrix as CSV with a header row of predicted classes.
pub fn confusion_csv(counts: &[Vec<usize>]) -> String {
    let mut out = String::from("actual");
    for j in 0..counts.len() {
        out.push_str(&format!(",pred_{j}"));
    }
    out.push('\n');
    for (i, row) in counts.iter().enumerate() {
        out.push_str(&i.to_string());
        for c in row {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}

/// Per-level, per-part PCL as CSV.
pub fn pcl_csv(report: &EvalReport) -> String {
    let parts = report.pcl.per_part.len();
    let mut out = String::from("level");
    for k in 0..parts {
        out.push_str(&format!(",part_{k}"));
    }
    out.push_str(",average\n");
    for l in &report.levels {
        out.push_str(&l.level);
        for v in &l.pcl.per_part {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", l.pcl.average));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    /// One backbone and RPN pass feeding every head.
    Shared,
    /// One full network pass per level.
    Separate,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Shared => "shared",
            BenchMode::Separate => "separate",
        })
    }
}

impl FromStr for BenchMode {
    type Err = WsdlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(BenchMode::Shared),
            "separate" => Ok(BenchMode::Separate),
            other => Err(WsdlError::Invalid(format!(
                "unknown bench mode {other:?}, expected shared or separate"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub mode: BenchMode,
    pub levels: usize,
    pub images: usize,
    /// Wall-clock seconds of each timed repeat.
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
    pub images_per_second: f64,
}

/// Median of a non-empty slice; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Single-threaded throughput over `images`, median of `repeats` timed
/// passes after an untimed warm-up.
pub fn bench(dln: &Dln, images: &[RgbImage], mode: BenchMode, repeats: usize) -> Result<BenchResult> {
    if images.len() < BENCH_MIN_IMAGES {
        return Err(WsdlError::Invalid(format!(
            "bench needs at least {BENCH_MIN_IMAGES} images, got {}",
            images.len()
        )));
    }
    if repeats == 0 {
        return Err(WsdlError::Invalid("bench needs at least one repeat".into()));
    }
    let run = |img: &RgbImage| match mode {
        BenchMode::Shared => dln.infer(img),
        BenchMode::Separate => dln.infer_separate(img, None),
    };
    for img in images.iter().take(BENCH_WARMUP) {
        run(img)?;
    }
    let mut seconds = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for img in images {
            std::hint::black_box(run(img)?);
        }
        seconds.push(start.elapsed().as_secs_f64());
    }
    let median_seconds = median(&seconds);
    Ok(BenchResult {
        mode,
        levels: dln.levels().len(),
        images: images.len(),
        images_per_second: images.len() as f64 / median_seconds,
        median_seconds,
        seconds,
    })
}
