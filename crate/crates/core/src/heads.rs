//! RoI pooling over the shared feature map, the per-level localization
//! heads, and score fusion.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::BBox;
use crate::backbone::ParamSpec;
use crate::error::{Result, WsdlError};
use crate::rpn::{encode_box, iou, BoxDelta};
use crate::tensor::{argmax, BoundParams, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub roi_out: (usize, usize),
    pub hidden: usize,
    /// Foreground classes; heads predict one more (background, last index).
    pub num_classes: usize,
    pub fg_iou: f64,
    pub rois_per_image: usize,
    pub fg_fraction: f64,
    pub reg_weight: f64,
}

impl HeadConfig {
    pub fn new(num_classes: usize) -> Self {
        HeadConfig {
            roi_out: (4, 4),
            hidden: 128,
            num_classes,
            fg_iou: 0.5,
            rois_per_image: 16,
            fg_fraction: 0.25,
            reg_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(WsdlError::Config("heads need at least 2 classes".into()));
        }
        if self.roi_out.0 == 0 || self.roi_out.1 == 0 || self.hidden == 0 || self.rois_per_image == 0 {
            return Err(WsdlError::Config(
                "roi_out, hidden and rois_per_image must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.fg_iou) || !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(WsdlError::Config("fg_iou and fg_fraction must lie in [0,1]".into()));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(WsdlError::Config("reg_weight must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn background(&self) -> usize {
        self.num_classes
    }

    pub fn input_len(&self, channels: usize) -> usize {
        channels * self.roi_out.0 * self.roi_out.1
    }
}

/// Feature-grid span covered by `[lo, hi)` image pixels: divided by stride,
/// rounded outward, clamped to the grid, at least one cell wide.
fn project(lo: f64, hi: f64, stride: usize, extent: usize) -> Option<(usize, usize)> {
    let s = stride as f64;
    let start = (lo / s).floor().max(0.0);
    let end = (hi / s).ceil().min(extent as f64);
    if start >= extent as f64 || end <= 0.0 {
        return None;
    }
    let start = start as usize;
    let end = (end as usize).max(start + 1);
    Some((start, end))
}

/// Bin `i` of `n` over a span of `len` cells: `[floor(i·len/n), ceil((i+1)·len/n))`.
/// Never empty when `len ≥ 1`.
fn bin_range(i: usize, n: usize, len: usize) -> (usize, usize) {
    (i * len / n, ((i + 1) * len).div_ceil(n))
}

/// Max-pool the projected box region of a `[C,h,w]` map into `out` bins.
pub fn roi_pool(features: &Tensor, b: &BBox, stride: usize, out: (usize, usize)) -> Result<Tensor> {
    let d = features.dims();
    let (c, h, w) = match d {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        _ => return Err(WsdlError::shape("roi_pool", format!("expected [C,h,w], got {d:?}"))),
    };
    let outside = || WsdlError::InvalidBox(format!("{b:?} lies outside the {w}x{h} grid"));
    let (x0, x1) = project(b.x_min, b.x_max, stride, w).ok_or_else(outside)?;
    let (y0, y1) = project(b.y_min, b.y_max, stride, h).ok_or_else(outside)?;
    let (oh, ow) = out;
    let src = features.data();
    let mut pooled = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for by in 0..oh {
            let (ry0, ry1) = bin_range(by, oh, y1 - y0);
            for bx in 0..ow {
                let (rx0, rx1) = bin_range(bx, ow, x1 - x0);
                let mut m = f64::NEG_INFINITY;
                for y in y0 + ry0..y0 + ry1 {
                    for x in x0 + rx0..x0 + rx1 {
                        m = m.max(plane[y * w + x]);
                    }
                }
                pooled.push(m);
            }
        }
    }
    Tensor::new(&[c, oh, ow], pooled)
}

pub fn head_prefix(level: &str) -> String {
    format!("head.{level}")
}

/// Fixed divisor applied to pooled features before the first layer. Not
/// trained; zero means no scaling.
pub const INPUT_SCALE: &str = "input_scale";

pub fn head_specs(config: &HeadConfig, channels: usize) -> Vec<ParamSpec> {
    let input = config.input_len(channels);
    let hidden = config.hidden;
    vec![
        ParamSpec::bias(INPUT_SCALE, 1),
        ParamSpec::weight("fc.weight", &[input, hidden], input),
        ParamSpec::bias("fc.bias", hidden),
        ParamSpec::weight("cls.weight", &[hidden, config.num_classes + 1], hidden),
        ParamSpec::bias("cls.bias", config.num_classes + 1),
        ParamSpec::weight("reg.weight", &[hidden, 4], hidden),
        ParamSpec::bias("reg.bias", 4),
    ]
}

/// Flattened pooled RoIs `[R, C'·bins]`, divided by the input scale →
/// hidden linear + relu → class scores `[R, C+1]` (softmax) and
/// class-agnostic deltas `[R, 4]`.
pub fn head_forward(g: &mut Graph, bound: &BoundParams, prefix: &str, pooled: Var) -> Result<(Var, Var)> {
    let p = |name: &str| -> Result<Var> {
        let full = format!("{prefix}.{name}");
        bound
            .get(&full)
            .copied()
            .ok_or(WsdlError::MissingParameters(vec![full]))
    };
    let scale = g.value(p(INPUT_SCALE)?).item();
    let pooled = if scale > 0.0 {
        g.scale(pooled, 1.0 / scale)?
    } else {
        pooled
    };
    let hidden = g.linear(pooled, p("fc.weight")?, p("fc.bias")?)?;
    let hidden = g.relu(hidden)?;
    let logits = g.linear(hidden, p("cls.weight")?, p("cls.bias")?)?;
    let scores = g.softmax(logits)?;
    let deltas = g.linear(hidden, p("reg.weight")?, p("reg.bias")?)?;
    Ok((scores, deltas))
}

/// Training target of one sampled region.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTarget {
    pub bbox: BBox,
    /// Class index, or `HeadConfig::background()`.
    pub class: usize,
    /// Set for foreground regions only.
    pub delta: Option<BoxDelta>,
}

/// Label proposals against one level's pseudo-box and sample
/// `rois_per_image` of them with at most `fg_fraction` foreground.
///
/// The whole-image box and the pseudo-box itself are appended to the
/// candidates, so at least one foreground region always exists.
pub fn head_targets(
    proposals: &[BBox],
    level_pseudo_box: &BBox,
    image_label: usize,
    image_size: (usize, usize),
    config: &HeadConfig,
    rng: &mut impl Rng,
) -> Vec<RoiTarget> {
    let mut candidates = proposals.to_vec();
    candidates.push(BBox::whole(image_size.0 as f64, image_size.1 as f64));
    candidates.push(*level_pseudo_box);
    let labeled: Vec<RoiTarget> = candidates
        .into_iter()
        .map(|b| {
            if iou(&b, level_pseudo_box) >= config.fg_iou {
                RoiTarget {
                    bbox: b,
                    class: image_label,
                    delta: encode_box(level_pseudo_box, &b).ok(),
                }
            } else {
                RoiTarget {
                    bbox: b,
                    class: config.background(),
                    delta: None,
                }
            }
        })
        .collect();
    let mut fg: Vec<usize> = (0..labeled.len())
        .filter(|&i| labeled[i].class != config.background())
        .collect();
    let mut bg: Vec<usize> = (0..labeled.len())
        .filter(|&i| labeled[i].class == config.background())
        .collect();
    fg.shuffle(rng);
    bg.shuffle(rng);
    let fg_quota = ((config.rois_per_image as f64 * config.fg_fraction).round() as usize).max(1);
    let n_fg = fg.len().min(fg_quota);
    let n_bg = bg.len().min(config.rois_per_image - n_fg.min(config.rois_per_image));
    let mut picked: Vec<usize> = fg[..n_fg].iter().chain(&bg[..n_bg]).copied().collect();
    picked.sort_unstable();
    picked.into_iter().map(|i| labeled[i].clone()).collect()
}

/// Cross-entropy over all regions plus `reg_weight · Σ_fg smoothL1 / R`.
pub fn head_loss(g: &mut Graph, scores: Var, deltas: Var, targets: &[RoiTarget], reg_weight: f64) -> Result<Var> {
    let classes: Vec<usize> = targets.iter().map(|t| t.class).collect();
    let cls = g.cross_entropy(scores, &classes)?;
    let fg: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].delta.is_some()).collect();
    if fg.is_empty() || reg_weight == 0.0 {
        return Ok(cls);
    }
    let target: Vec<f64> = fg
        .iter()
        .flat_map(|&i| targets[i].delta.expect("foreground").to_array())
        .collect();
    let pred = g.gather_rows(deltas, &fg)?;
    let target = g.leaf(Tensor::new(&[fg.len(), 4], target)?);
    let reg = g.smooth_l1(pred, target)?;
    let reg = g.scale(reg, reg_weight / targets.len() as f64)?;
    g.add(cls, reg)
}

/// Overlap with the top box at or above which a refined box joins the vote.
pub const VOTE_IOU: f64 = 0.5;

/// Weighted coordinate average of the boxes whose IoU with `boxes[top]` is
/// at least `thresh`. Falls back to `boxes[top]` when the weights sum to zero.
pub fn vote_box(boxes: &[BBox], weights: &[f64], top: usize, thresh: f64) -> Result<BBox> {
    if boxes.len() != weights.len() || top >= boxes.len() {
        return Err(WsdlError::shape(
            "vote_box",
            format!("{} boxes, {} weights, top {top}", boxes.len(), weights.len()),
        ));
    }
    let mut acc = [0.0; 4];
    let mut total = 0.0;
    for (b, &w) in boxes.iter().zip(weights) {
        if iou(b, &boxes[top]) >= thresh {
            acc[0] += w * b.x_min;
            acc[1] += w * b.y_min;
            acc[2] += w * b.x_max;
            acc[3] += w * b.y_max;
            total += w;
        }
    }
    if total > 0.0 {
        BBox::new(acc[0] / total, acc[1] / total, acc[2] / total, acc[3] / total)
    } else {
        Ok(boxes[top])
    }
}

/// Drop the background column and renormalize over the C foreground classes.
pub fn foreground_scores(scores: &[f64]) -> Vec<f64> {
    let fg = &scores[..scores.len() - 1];
    let total: f64 = fg.iter().sum();
    if total > 0.0 {
        fg.iter().map(|s| s / total).collect()
    } else {
        vec![1.0 / fg.len() as f64; fg.len()]
    }
}

/// Arithmetic mean of the per-level vectors and the full-image vector,
/// with the argmax class (lowest index on ties).
pub fn fuse_scores(per_level: &[Vec<f64>], full_image: &[f64]) -> Result<(Vec<f64>, usize)> {
    let c = full_image.len();
    if c == 0 || per_level.iter().any(|v| v.len() != c) {
        return Err(WsdlError::shape(
            "fuse_scores",
            format!(
                "level lengths {:?} vs full-image length {c}",
                per_level.iter().map(Vec::len).collect::<Vec<_>>()
            ),
        ));
    }
    let count = (per_level.len() + 1) as f64;
    let mut fused = full_image.to_vec();
    for v in per_level {
        fused.iter_mut().zip(v).for_each(|(f, x)| *f += x);
    }
    fused.iter_mut().for_each(|f| *f /= count);
    let class = argmax(&fused);
    Ok((fused, class))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPrediction {
    pub level: String,
    pub bbox: BBox,
    /// Foreground scores over C classes, summing to 1.
    pub scores: Vec<f64>,
    /// This head's foreground scores for the whole-image box.
    pub full_image: Vec<f64>,
}

impl LevelPrediction {
    /// Fusion of this level alone with its whole-image scores.
    pub fn single_level(&self) -> Result<(Vec<f64>, usize)> {
        fuse_scores(std::slice::from_ref(&self.scores), &self.full_image)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub levels: Vec<LevelPrediction>,
    pub full_image: Vec<f64>,
    pub fused: Vec<f64>,
    pub class: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::bind_params;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn roi_pool_examples() {
        let data: Vec<f64> = vec![3.0, -1.0, 7.5, 2.0, 0.0, 9.0, 1.0, 4.0, -2.0, 6.0, 5.0, 8.0];
        let f = Tensor::new(&[2, 2, 3], data).unwrap();
        let whole = b(0., 0., 3., 2.);
        assert_eq!(roi_pool(&f, &whole, 1, (1, 1)).unwrap().data(), &[9.0, 8.0]);

        let ramp = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let pooled = roi_pool(&ramp, &b(0., 0., 32., 32.), 8, (2, 2)).unwrap();
        assert_eq!(pooled.data(), &[5., 7., 13., 15.]);

        let flat = Tensor::full(&[3, 5, 5], 1.25);
        let pooled = roi_pool(&flat, &b(3., 9., 17., 30.), 4, (4, 4)).unwrap();
        assert!(pooled.data().iter().all(|&v| v == 1.25));

        assert!(roi_pool(&ramp, &b(40., 40., 50., 50.), 8, (2, 2)).is_err());
    }

    #[test]
    fn small_region_replicates_cells() {
        let ramp = Tensor::new(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        // Box covering the single cell (1,2) in grid units.
        let pooled = roi_pool(&ramp, &b(17., 9., 23., 15.), 8, (4, 4)).unwrap();
        assert!(pooled.data().iter().all(|&v| v == 6.0));
    }

    #[test]
    fn zero_weight_head_is_uniform() {
        let cfg = HeadConfig::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = head_specs(&cfg, 2);
        let params: crate::tensor::ParamSet = crate::backbone::init_params(&specs, &mut rng)
            .into_iter()
            .map(|(k, v)| (format!("head.x.{k}"), Tensor::zeros(v.dims())))
            .collect();
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &params, false);
        let x = g.leaf(Tensor::full(&[2, cfg.input_len(2)], 0.7));
        let (s, d) = head_forward(&mut g, &bound, "head.x", x).unwrap();
        assert!(g.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_target_rules() {
        let cfg = HeadConfig::new(4);
        let pseudo = b(10., 10., 30., 30.);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // IoU exactly 0.5: (10,10,30,40) has area 600, inter 400, union 600 -> 2/3; use (10,10,30,50): inter 400, union 800.
        let at_threshold = b(10., 10., 30., 50.);
        let disjoint = b(40., 40., 60., 60.);
        let t = head_targets(&[pseudo, at_threshold, disjoint], &pseudo, 2, (64, 64), &cfg, &mut rng);
        let find = |bb: BBox| t.iter().find(|r| r.bbox == bb).cloned();
        let exact = find(pseudo).unwrap();
        assert_eq!(exact.class, 2);
        assert_eq!(exact.delta, Some(BoxDelta::ZERO));
        assert_eq!(find(at_threshold).unwrap().class, 2);
        assert_eq!(find(disjoint).unwrap().class, cfg.background());
        assert!(t.len() <= cfg.rois_per_image);
        assert!(t.iter().filter(|r| r.class != cfg.background()).count() <= 4);
    }

    #[test]
    fn fuse_examples() {
        let (f, c) = fuse_scores(&[vec![0.2, 0.8], vec![0.2, 0.8]], &[0.2, 0.8]).unwrap();
        assert!(f.iter().zip([0.2, 0.8]).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(c, 1);
        let (f, c) = fuse_scores(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.5, 0.5]).unwrap();
        assert_eq!(f, vec![0.5, 0.5]);
        assert_eq!(c, 0);
        assert!(fuse_scores(&[vec![1.0]], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn head_loss_zero_at_perfect_prediction() {
        let cfg = HeadConfig::new(2);
        let targets = vec![
            RoiTarget {
                bbox: b(0., 0., 8., 8.),
                class: 1,
                delta: Some(BoxDelta {
                    tx: 0.1,
                    ty: -0.2,
                    tw: 0.3,
                    th: 0.0,
                }),
            },
            RoiTarget {
                bbox: b(0., 0., 64., 64.),
                class: cfg.background(),
                delta: None,
            },
        ];
        let mut g = Graph::new();
        let s = g.leaf(Tensor::new(&[2, 3], vec![0., 1., 0., 0., 0., 1.]).unwrap());
        let d = g.leaf(Tensor::new(&[2, 4], vec![0.1, -0.2, 0.3, 0.0, 5., 5., 5., 5.]).unwrap());
        let l = head_loss(&mut g, s, d, &targets, cfg.reg_weight).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn foreground_renormalization() {
        let s = foreground_scores(&[0.1, 0.3, 0.6]);
        assert!((s[0] - 0.25).abs() < 1e-12 && (s[1] - 0.75).abs() < 1e-12);
        assert_eq!(foreground_scores(&[0.0, 0.0, 1.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn vote_box_averages_overlapping() {
        let b = |x0: f64, y0: f64, x1: f64, y1: f64| BBox::new(x0, y0, x1, y1).unwrap();
        let boxes = [
            b(0.0, 0.0, 10.0, 10.0),
            b(2.0, 0.0, 12.0, 10.0),
            b(40.0, 40.0, 50.0, 50.0),
        ];
        let v = vote_box(&boxes, &[1.0, 3.0, 100.0], 0, VOTE_IOU).unwrap();
        assert_eq!(v, b(1.5, 0.0, 11.5, 10.0));
        let v = vote_box(&boxes, &[1.0, 3.0, 100.0], 2, VOTE_IOU).unwrap();
        assert_eq!(v, boxes[2]);
        let v = vote_box(&boxes, &[0.0, 0.0, 0.0], 1, VOTE_IOU).unwrap();
        assert_eq!(v, boxes[1]);
        assert!(vote_box(&boxes, &[1.0], 0, VOTE_IOU).is_err());
        assert!(vote_box(&boxes, &[1.0; 3], 3, VOTE_IOU).is_err());
    }
}
