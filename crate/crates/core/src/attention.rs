//! Multi-level attention maps, OTSU binarization and largest-component
//! boxes: the pseudo ground truth that supervises the localization network.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_forward, BackboneConfig, FeatureSet, CAM_LEVEL};
use crate::error::{Result, WsdlError};
use crate::tensor::{ParamSet, Tensor};

/// Axis-aligned box with half-open extents `[x_min, x_max) × [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(WsdlError::InvalidBox(format!("non-finite coordinates {b:?}")));
        }
        if x_max <= x_min || y_max <= y_min {
            return Err(WsdlError::InvalidBox(format!("empty extent {b:?}")));
        }
        Ok(b)
    }

    /// The full `[0,width) × [0,height)` frame.
    pub fn whole(width: f64, height: f64) -> Self {
        BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: width,
            y_max: height,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    /// Intersect with the image frame; `None` when nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
        .ok()
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox {
            x_min: self.x_min * factor,
            y_min: self.y_min * factor,
            x_max: self.x_max * factor,
            y_max: self.y_max * factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub level: String,
    pub stride: usize,
}

impl AttentionMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub cells: Vec<bool>,
    pub height: usize,
    pub width: usize,
    pub threshold: f64,
}

impl BinaryMask {
    pub fn new(cells: Vec<bool>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || cells.len() != height * width {
            return Err(WsdlError::shape(
                "binary_mask",
                format!("{} cells for {height}x{width}", cells.len()),
            ));
        }
        Ok(BinaryMask {
            cells,
            height,
            width,
            threshold: f64::NAN,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }
}

/// `M(x,y) = Σ_u w_u f_u(x,y)` over the channels of one feature map.
///
/// The cam level weighs channels by the classifier column of
/// `predicted_class`; every other level uses the channel mean.
pub fn attention_map(
    features: &Tensor,
    level: &str,
    stride: usize,
    class_weights: Option<&Tensor>,
    predicted_class: Option<usize>,
) -> Result<AttentionMap> {
    let d = features.dims();
    let (channels, h, w) = match d {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        _ => {
            return Err(WsdlError::shape(
                "attention_map",
                format!("expected [C,h,w] features, got {d:?}"),
            ))
        }
    };
    let weights: Vec<f64> = if level == CAM_LEVEL {
        let (Some(cw), Some(class)) = (class_weights, predicted_class) else {
            return Err(WsdlError::Invalid(
                "cam-level attention needs class weights and a predicted class".into(),
            ));
        };
        let wd = cw.dims();
        if wd.len() != 2 || wd[0] != channels || class >= wd[1] {
            return Err(WsdlError::shape(
                "attention_map",
                format!("class weights {wd:?} vs {channels} channels, class {class}"),
            ));
        }
        (0..channels).map(|u| cw.data()[u * wd[1] + class]).collect()
    } else {
        vec![1.0 / channels as f64; channels]
    };
    let area = h * w;
    let mut values = vec![0.0; area];
    for (u, plane) in features.data().chunks(area).enumerate() {
        let wu = weights[u];
        values.iter_mut().zip(plane).for_each(|(m, f)| *m += wu * f);
    }
    Ok(AttentionMap {
        values,
        height: h,
        width: w,
        level: level.to_string(),
        stride,
    })
}

/// Result of OTSU thresholding over a min-max normalized map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    /// Normalized threshold `bucket / bins`; cells at or above it are foreground.
    pub value: f64,
    pub bucket: usize,
    pub bins: usize,
    /// Set when the map has no spread, so no split exists.
    pub degenerate: bool,
}

/// Histogram bucket of each cell after min-max normalization to `[0,1]`.
/// `None` for a constant map.
pub fn normalized_buckets(values: &[f64], bins: usize) -> Option<Vec<usize>> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || !(max > min) {
        return None;
    }
    let span = max - min;
    Some(
        values
            .iter()
            .map(|&v| (((v - min) / span * bins as f64) as usize).min(bins - 1))
            .collect(),
    )
}

/// OTSU's method over `bins` buckets: the bucket boundary maximizing
/// between-class variance, lowest boundary on ties.
pub fn otsu_threshold(map: &AttentionMap, bins: usize) -> Threshold {
    assert!(bins >= 2, "otsu needs at least two bins");
    let degenerate = Threshold {
        value: 0.0,
        bucket: 0,
        bins,
        degenerate: true,
    };
    let Some(buckets) = normalized_buckets(&map.values, bins) else {
        return degenerate;
    };
    let mut hist = vec![0u64; bins];
    for &b in &buckets {
        hist[b] += 1;
    }
    let total_n: u64 = hist.iter().sum();
    let total_s: u64 = hist.iter().enumerate().map(|(b, &n)| b as u64 * n).sum();

    // Between-class variance is proportional to (n1·s0 − n0·s1)² / (n0·n1);
    // candidates are compared by cross-multiplication so ties are exact.
    let mut best: Option<(usize, u128, u128)> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for k in 1..bins {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_s - s0;
        let a = (n1 as i128 * s0 as i128 - n0 as i128 * s1 as i128).unsigned_abs();
        let num = a * a;
        let den = n0 as u128 * n1 as u128;
        let better = match best {
            None => true,
            Some((_, bnum, bden)) => match (num.checked_mul(bden), bnum.checked_mul(den)) {
                (Some(l), Some(r)) => l > r,
                _ => (num as f64 / den as f64) > (bnum as f64 / bden as f64),
            },
        };
        if better {
            best = Some((k, num, den));
        }
    }
    match best {
        Some((k, _, _)) => Threshold {
            value: k as f64 / bins as f64,
            bucket: k,
            bins,
            degenerate: false,
        },
        None => degenerate,
    }
}

/// Foreground = normalized bucket at or above the threshold bucket; a
/// degenerate threshold marks the whole map as foreground.
pub fn binarize(map: &AttentionMap, threshold: &Threshold) -> BinaryMask {
    let cells = if threshold.degenerate {
        vec![true; map.values.len()]
    } else {
        match normalized_buckets(&map.values, threshold.bins) {
            Some(b) => b.into_iter().map(|b| b >= threshold.bucket).collect(),
            None => vec![true; map.values.len()],
        }
    };
    BinaryMask {
        cells,
        height: map.height,
        width: map.width,
        threshold: threshold.value,
    }
}

/// Tight grid box around the largest 4-connected foreground component.
/// Equal-size components resolve to the one found first in row-major order.
pub fn largest_component_bbox(mask: &BinaryMask) -> Result<BBox> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, [usize; 4])> = None;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.cells[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut count = 0;
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(idx) = queue.pop_front() {
            count += 1;
            let (r, c) = (idx / w, idx % w);
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
            let mut visit = |n: usize| {
                if mask.cells[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            };
            if r > 0 {
                visit(idx - w);
            }
            if r + 1 < h {
                visit(idx + w);
            }
            if c > 0 {
                visit(idx - 1);
            }
            if c + 1 < w {
                visit(idx + 1);
            }
        }
        if best.is_none_or(|(n, _)| count > n) {
            best = Some((count, [c0, r0, c1 + 1, r1 + 1]));
        }
    }
    let (_, [x0, y0, x1, y1]) = best.ok_or(WsdlError::EmptyForeground)?;
    BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)
}

/// Scale a feature-grid box by `stride` and clip it to the image.
pub fn to_image_coords(b: &BBox, stride: usize, image_w: usize, image_h: usize) -> BBox {
    b.scaled(stride as f64)
        .clip(image_w as f64, image_h as f64)
        .unwrap_or_else(|| BBox::whole(image_w as f64, image_h as f64))
}

/// Number of OTSU histogram buckets.
pub const OTSU_BINS: usize = 256;

/// Map → threshold → largest component → image box, falling back to the
/// whole image for constant maps or empty foreground.
pub fn box_from_map(map: &AttentionMap, image_w: usize, image_h: usize) -> BBox {
    let threshold = otsu_threshold(map, OTSU_BINS);
    let mask = binarize(map, &threshold);
    match largest_component_bbox(&mask) {
        Ok(b) => to_image_coords(&b, map.stride, image_w, image_h),
        Err(_) => BBox::whole(image_w as f64, image_h as f64),
    }
}

/// Attention maps for every configured level of one sample in a batch.
pub fn level_maps(features: &FeatureSet, sample: usize, predicted: usize) -> Result<Vec<AttentionMap>> {
    features
        .levels
        .iter()
        .map(|level| {
            let (tensor, stride) = &features.taps[level];
            let plane = sample_plane(tensor, sample)?;
            if level == CAM_LEVEL {
                attention_map(
                    &plane,
                    level,
                    *stride,
                    Some(&features.cam_class_weights),
                    Some(predicted),
                )
            } else {
                attention_map(&plane, level, *stride, None, None)
            }
        })
        .collect()
}

fn sample_plane(t: &Tensor, sample: usize) -> Result<Tensor> {
    let d = t.dims();
    let per = d[1] * d[2] * d[3];
    Tensor::new(&d[1..], t.data()[sample * per..(sample + 1) * per].to_vec())
}

/// One pseudo-box per configured level for each image in `images`,
/// using the MAEN-predicted class for the cam level.
pub fn pseudo_boxes_batch(
    images: &Tensor,
    maen_params: &ParamSet,
    config: &BackboneConfig,
) -> Result<Vec<Vec<(String, BBox)>>> {
    let features = backbone_forward(images, maen_params, config)?;
    let logits = &features.cam_logits;
    let classes = logits.dims()[1];
    (0..images.dims()[0])
        .map(|s| {
            let predicted = crate::tensor::argmax(&logits.data()[s * classes..(s + 1) * classes]);
            let maps = level_maps(&features, s, predicted)?;
            Ok(maps
                .iter()
                .map(|m| (m.level.clone(), box_from_map(m, config.input_w, config.input_h)))
                .collect())
        })
        .collect()
}

pub fn pseudo_boxes(image: &Tensor, maen_params: &ParamSet, config: &BackboneConfig) -> Result<Vec<(String, BBox)>> {
    let mut all = pseudo_boxes_batch(image, maen_params, config)?;
    if all.len() != 1 {
        return Err(WsdlError::shape("pseudo_boxes", "expected a single image"));
    }
    Ok(all.remove(0))
}

/// Write a map as an 8-bit binary PGM, min-max scaled.
pub fn write_pgm(map: &AttentionMap, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = match normalized_buckets(&map.values, 256) {
        Some(b) => b.into_iter().map(|v| v as u8).collect(),
        None => vec![0; map.values.len()],
    };
    let mut file = std::fs::File::create(path).map_err(|e| WsdlError::io(path, e))?;
    write!(file, "P5\n{} {}\n255\n", map.width, map.height).map_err(|e| WsdlError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| WsdlError::io(path, e))
}
