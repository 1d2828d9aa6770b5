//! Anchors, IoU geometry, anchor labeling against pseudo-boxes, the
//! region-proposal multi-task loss, and proposal generation with NMS.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::BBox;
use crate::backbone::ParamSpec;
use crate::error::{Result, WsdlError};
use crate::tensor::{BoundParams, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub stride: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub nms_iou: f64,
    pub pre_nms_top: usize,
    pub post_nms_top: usize,
    pub lambda: f64,
    pub anchors_per_image_sampled: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            scales: vec![16.0, 32.0, 48.0],
            ratios: vec![0.5, 1.0, 2.0],
            stride: 8,
            pos_iou: 0.7,
            neg_iou: 0.3,
            nms_iou: 0.7,
            pre_nms_top: 64,
            post_nms_top: 16,
            lambda: 10.0,
            anchors_per_image_sampled: 64,
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors_per_cell() != 9 {
            return Err(WsdlError::Config(format!(
                "expected 3 scales x 3 ratios, got {} x {}",
                self.scales.len(),
                self.ratios.len()
            )));
        }
        if self.scales.iter().chain(&self.ratios).any(|&v| !(v > 0.0)) {
            return Err(WsdlError::Config("anchor scales and ratios must be positive".into()));
        }
        if !(0.0 <= self.neg_iou && self.neg_iou < self.pos_iou && self.pos_iou <= 1.0) {
            return Err(WsdlError::Config(format!(
                "need 0 <= neg_iou < pos_iou <= 1, got {} / {}",
                self.neg_iou, self.pos_iou
            )));
        }
        if self.stride == 0 || self.post_nms_top == 0 || self.pre_nms_top == 0 {
            return Err(WsdlError::Config("stride and proposal counts must be positive".into()));
        }
        if self.anchors_per_image_sampled < 2 || !(self.lambda >= 0.0) {
            return Err(WsdlError::Config("bad anchor sampling or lambda".into()));
        }
        Ok(())
    }
}

/// Intersection over union under the half-open convention.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Box regression offsets relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxDelta {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }
}

pub fn encode_box(b: &BBox, anchor: &BBox) -> Result<BoxDelta> {
    if !(b.width() > 0.0 && b.height() > 0.0 && anchor.width() > 0.0 && anchor.height() > 0.0) {
        return Err(WsdlError::InvalidBox(format!(
            "cannot encode {b:?} against {anchor:?}: nonpositive extent"
        )));
    }
    let (cx, cy) = b.center();
    let (ax, ay) = anchor.center();
    Ok(BoxDelta {
        tx: (cx - ax) / anchor.width(),
        ty: (cy - ay) / anchor.height(),
        tw: (b.width() / anchor.width()).ln(),
        th: (b.height() / anchor.height()).ln(),
    })
}

/// Exact inverse of [`encode_box`], without clipping.
pub fn decode_box(delta: &BoxDelta, anchor: &BBox) -> Result<BBox> {
    let (ax, ay) = anchor.center();
    let cx = ax + delta.tx * anchor.width();
    let cy = ay + delta.ty * anchor.height();
    let w = anchor.width() * delta.tw.exp();
    let h = anchor.height() * delta.th.exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Largest log-scale change applied at proposal time.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Decode with the log-scale offsets bounded, then clip to the image.
pub fn decode_clipped(delta: &BoxDelta, anchor: &BBox, width: f64, height: f64) -> Option<BBox> {
    let bounded = BoxDelta {
        tw: delta.tw.min(MAX_LOG_SCALE),
        th: delta.th.min(MAX_LOG_SCALE),
        ..*delta
    };
    decode_box(&bounded, anchor).ok()?.clip(width, height)
}

/// Anchors for every grid cell, ordered by row, column, then scale-major
/// over (scale, ratio). Ratio is height / width.
pub fn generate_anchors(grid_h: usize, grid_w: usize, config: &AnchorConfig) -> Vec<BBox> {
    let stride = config.stride as f64;
    let mut anchors = Vec::with_capacity(grid_h * grid_w * config.anchors_per_cell());
    for y in 0..grid_h {
        for x in 0..grid_w {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            for &s in &config.scales {
                for &r in &config.ratios {
                    let w = s / r.sqrt();
                    let h = s * r.sqrt();
                    anchors.push(BBox {
                        x_min: cx - 0.5 * w,
                        y_min: cy - 0.5 * h,
                        x_max: cx + 0.5 * w,
                        y_max: cy + 0.5 * h,
                    });
                }
            }
        }
    }
    anchors
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Labeled anchors of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBatch {
    pub anchors: Vec<BBox>,
    pub labels: Vec<AnchorLabel>,
    /// Regression target of each positive anchor.
    pub targets: Vec<Option<BoxDelta>>,
    /// Anchors that contribute to the loss, ascending.
    pub sampled: Vec<usize>,
    /// Number of anchor positions (grid cells), the regression normalizer.
    pub positions: usize,
}

impl AnchorBatch {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == AnchorLabel::Positive)
            .map(|(i, _)| i)
    }
}

/// Assign positive / negative / ignore labels, regression targets and the
/// loss sample of one image.
///
/// Each pseudo-box forces exactly one positive: its highest-IoU anchor
/// (lowest index on ties).
pub fn label_anchors(
    anchors: &[BBox],
    pseudo_boxes: &[BBox],
    config: &AnchorConfig,
    rng: &mut impl Rng,
) -> Result<AnchorBatch> {
    if pseudo_boxes.is_empty() {
        return Err(WsdlError::Invalid("label_anchors needs at least one pseudo-box".into()));
    }
    if anchors.is_empty() {
        return Err(WsdlError::Invalid("label_anchors needs at least one anchor".into()));
    }
    let k = config.anchors_per_cell();
    let mut best_iou = vec![f64::NEG_INFINITY; anchors.len()];
    let mut best_box = vec![0usize; anchors.len()];
    let mut forced = vec![false; anchors.len()];
    for (j, pb) in pseudo_boxes.iter().enumerate() {
        let mut top = (0usize, f64::NEG_INFINITY);
        for (i, a) in anchors.iter().enumerate() {
            let v = iou(a, pb);
            if v > best_iou[i] {
                best_iou[i] = v;
                best_box[i] = j;
            }
            if v > top.1 {
                top = (i, v);
            }
        }
        forced[top.0] = true;
    }
    let mut labels = Vec::with_capacity(anchors.len());
    let mut targets = Vec::with_capacity(anchors.len());
    for i in 0..anchors.len() {
        let label = if forced[i] || best_iou[i] >= config.pos_iou {
            AnchorLabel::Positive
        } else if best_iou[i] <= config.neg_iou {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
        targets.push(if label == AnchorLabel::Positive {
            Some(encode_box(&pseudo_boxes[best_box[i]], &anchors[i])?)
        } else {
            None
        });
        labels.push(label);
    }
    let mut pos: Vec<usize> = (0..anchors.len())
        .filter(|&i| labels[i] == AnchorLabel::Positive)
        .collect();
    let mut neg: Vec<usize> = (0..anchors.len())
        .filter(|&i| labels[i] == AnchorLabel::Negative)
        .collect();
    let budget = config.anchors_per_image_sampled;
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min(budget / 2);
    let n_neg = neg.len().min(budget - n_pos);
    let mut sampled: Vec<usize> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    sampled.sort_unstable();
    Ok(AnchorBatch {
        anchors: anchors.to_vec(),
        labels,
        targets,
        sampled,
        positions: (anchors.len() / k).max(1),
    })
}

pub fn rpn_head_specs(channels: usize, anchors_per_cell: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight("conv.weight", &[channels, channels, 3, 3], channels * 9),
        ParamSpec::bias("conv.bias", channels),
        ParamSpec::weight("obj.weight", &[2 * anchors_per_cell, channels, 1, 1], channels),
        ParamSpec::bias("obj.bias", 2 * anchors_per_cell),
        ParamSpec::weight("reg.weight", &[4 * anchors_per_cell, channels, 1, 1], channels),
        ParamSpec::bias("reg.bias", 4 * anchors_per_cell),
    ]
}

pub const RPN_PREFIX: &str = "rpn";

/// Sliding 3×3 network over the shared map. Returns objectness
/// probabilities `[N·h·w·k, 2]` (column 1 = object) and deltas
/// `[N·h·w·k, 4]`, rows in anchor order per image.
pub fn rpn_forward(g: &mut Graph, bound: &BoundParams, shared: Var, anchors_per_cell: usize) -> Result<(Var, Var)> {
    let p = |name: &str| -> Result<Var> {
        let full = format!("{RPN_PREFIX}.{name}");
        bound
            .get(&full)
            .copied()
            .ok_or(WsdlError::MissingParameters(vec![full]))
    };
    let hidden = g.conv2d(shared, p("conv.weight")?, p("conv.bias")?, 1, 1)?;
    let hidden = g.relu(hidden)?;
    let obj = g.conv2d(hidden, p("obj.weight")?, p("obj.bias")?, 1, 0)?;
    let reg = g.conv2d(hidden, p("reg.weight")?, p("reg.bias")?, 1, 0)?;
    let obj = g.channels_last(obj)?;
    let rows = g.dims(obj)[0] * anchors_per_cell;
    let obj = g.reshape(obj, &[rows, 2])?;
    let obj = g.softmax(obj)?;
    let reg = g.channels_last(reg)?;
    let reg = g.reshape(reg, &[rows, 4])?;
    Ok((obj, reg))
}

/// `(1/N_cls)·Σ L_cls + λ·(1/N_reg)·Σ p*·L_reg` for one image.
///
/// `obj_probs` is `[A,2]` (column 1 = object), `deltas` is `[A,4]`; rows
/// `offset..offset+A` of larger batched tensors may be addressed with
/// `row_offset`.
pub fn rpn_loss(
    g: &mut Graph,
    obj_probs: Var,
    deltas: Var,
    batch: &AnchorBatch,
    config: &AnchorConfig,
    row_offset: usize,
) -> Result<Var> {
    let n = batch.anchors.len();
    let (od, dd) = (g.dims(obj_probs).to_vec(), g.dims(deltas).to_vec());
    if od.len() != 2 || od[1] != 2 || dd.len() != 2 || dd[1] != 4 || od[0] < row_offset + n || dd[0] < row_offset + n {
        return Err(WsdlError::shape(
            "rpn_loss",
            format!("scores {od:?} / deltas {dd:?} not aligned with {n} anchors at offset {row_offset}"),
        ));
    }
    if batch.sampled.is_empty() {
        return Err(WsdlError::Invalid("rpn_loss: no sampled anchors".into()));
    }
    let rows: Vec<usize> = batch.sampled.iter().map(|&i| i + row_offset).collect();
    let labels: Vec<usize> = batch
        .sampled
        .iter()
        .map(|&i| usize::from(batch.labels[i] == AnchorLabel::Positive))
        .collect();
    let picked = g.gather_rows(obj_probs, &rows)?;
    let cls = g.cross_entropy(picked, &labels)?;

    let positives: Vec<usize> = batch
        .sampled
        .iter()
        .copied()
        .filter(|&i| batch.labels[i] == AnchorLabel::Positive)
        .collect();
    if positives.is_empty() {
        return Ok(cls);
    }
    let target: Vec<f64> = positives
        .iter()
        .flat_map(|&i| batch.targets[i].expect("positive anchors carry targets").to_array())
        .collect();
    let pred_rows: Vec<usize> = positives.iter().map(|&i| i + row_offset).collect();
    let pred = g.gather_rows(deltas, &pred_rows)?;
    let target = g.leaf(Tensor::new(&[positives.len(), 4], target)?);
    let reg = g.smooth_l1(pred, target)?;
    let reg = g.scale(reg, config.lambda / batch.positions as f64)?;
    g.add(cls, reg)
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order (lower index first on equal scores); a box is dropped when its IoU
/// with any kept box exceeds `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms needs one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Decode and clip every anchor, keep the `pre_nms_top` highest scores,
/// suppress overlaps and return at most `post_nms_top` proposals.
pub fn propose(
    obj_scores: &[f64],
    deltas: &[f64],
    anchors: &[BBox],
    config: &AnchorConfig,
    image_w: usize,
    image_h: usize,
) -> Result<Vec<(BBox, f64)>> {
    if obj_scores.len() != anchors.len() || deltas.len() != 4 * anchors.len() {
        return Err(WsdlError::shape(
            "propose",
            format!(
                "{} scores and {} delta values for {} anchors",
                obj_scores.len(),
                deltas.len(),
                anchors.len()
            ),
        ));
    }
    let mut candidates: Vec<(BBox, f64, usize)> = anchors
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let d = BoxDelta::from_slice(&deltas[4 * i..4 * i + 4]);
            decode_clipped(&d, a, image_w as f64, image_h as f64).map(|b| (b, obj_scores[i], i))
        })
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)));
    candidates.truncate(config.pre_nms_top);
    let boxes: Vec<BBox> = candidates.iter().map(|c| c.0).collect();
    let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
    Ok(nms(&boxes, &scores, config.nms_iou)
        .into_iter()
        .take(config.post_nms_top)
        .map(|i| (boxes[i], scores[i]))
        .collect())
}
