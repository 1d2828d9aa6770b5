//! `key = value` run configuration covering generation, backbone, anchors,
//! heads and training. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Result, WsdlError};
use crate::heads::HeadConfig;
use crate::pipeline::TrainConfig;
use crate::rpn::AnchorConfig;
use crate::synthdata::{default_codebook, GenConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub heads: HeadConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::new(8, 7)
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "num_classes",
    "image_size",
    "train_count",
    "test_count",
    "object_min",
    "object_max",
    "clutter_density",
    "glyph_cell",
    "stage_channels",
    "convs_per_stage",
    "cam_channels",
    "levels",
    "anchor_scales",
    "anchor_ratios",
    "anchor_stride",
    "pos_iou",
    "neg_iou",
    "nms_iou",
    "pre_nms_top",
    "post_nms_top",
    "rpn_lambda",
    "anchors_sampled",
    "roi_out",
    "hidden",
    "fg_iou",
    "rois_per_image",
    "fg_fraction",
    "head_reg_weight",
    "maen_epochs",
    "rpn_epochs",
    "head_epochs",
    "maen_batch",
    "rpn_batch",
    "head_batch",
    "maen_learning_rate",
    "rpn_learning_rate",
    "rpn_shared_learning_rate",
    "head_learning_rate",
    "momentum",
    "weight_decay",
    "clip_norm",
    "maen_decay_epoch",
    "rpn_decay_epoch",
    "head_decay_epoch",
];

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| WsdlError::Config(format!("{key}: cannot parse {value:?}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| scalar(key, v)).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        RunConfig {
            gen: GenConfig::new(num_classes, seed),
            backbone: BackboneConfig::new(num_classes),
            anchors: AnchorConfig::default(),
            heads: HeadConfig::new(num_classes),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
        }
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "seed" => {
                let s = scalar(key, value)?;
                self.train.seed = s;
                self.gen.seed = s;
            }
            "num_classes" => {
                let c: usize = scalar(key, value)?;
                self.gen.num_classes = c;
                self.gen.codebook = default_codebook(c);
                self.backbone.num_classes = c;
                self.heads.num_classes = c;
            }
            "image_size" => {
                let s = scalar(key, value)?;
                self.gen.image_size = s;
                self.backbone.input_h = s;
                self.backbone.input_w = s;
            }
            "train_count" => self.gen.train_count = scalar(key, value)?,
            "test_count" => self.gen.test_count = scalar(key, value)?,
            "object_min" => self.gen.object_min = scalar(key, value)?,
            "object_max" => self.gen.object_max = scalar(key, value)?,
            "clutter_density" => self.gen.clutter_density = scalar(key, value)?,
            "glyph_cell" => self.gen.glyph_cell = scalar(key, value)?,
            "stage_channels" => self.backbone.stage_channels = list(key, value)?,
            "convs_per_stage" => self.backbone.convs_per_stage = scalar(key, value)?,
            "cam_channels" => self.backbone.cam_channels = scalar(key, value)?,
            "levels" => self.backbone.tap_levels = value.split(',').map(|s| s.trim().to_string()).collect(),
            "anchor_scales" => self.anchors.scales = list(key, value)?,
            "anchor_ratios" => self.anchors.ratios = list(key, value)?,
            "anchor_stride" => self.anchors.stride = scalar(key, value)?,
            "pos_iou" => self.anchors.pos_iou = scalar(key, value)?,
            "neg_iou" => self.anchors.neg_iou = scalar(key, value)?,
            "nms_iou" => self.anchors.nms_iou = scalar(key, value)?,
            "pre_nms_top" => self.anchors.pre_nms_top = scalar(key, value)?,
            "post_nms_top" => self.anchors.post_nms_top = scalar(key, value)?,
            "rpn_lambda" => self.anchors.lambda = scalar(key, value)?,
            "anchors_sampled" => self.anchors.anchors_per_image_sampled = scalar(key, value)?,
            "roi_out" => {
                let v: Vec<usize> = list(key, value)?;
                if v.len() != 2 {
                    return Err(WsdlError::Config(format!(
                        "roi_out: expected two values, got {value:?}"
                    )));
                }
                self.heads.roi_out = (v[0], v[1]);
            }
            "hidden" => self.heads.hidden = scalar(key, value)?,
            "fg_iou" => self.heads.fg_iou = scalar(key, value)?,
            "rois_per_image" => self.heads.rois_per_image = scalar(key, value)?,
            "fg_fraction" => self.heads.fg_fraction = scalar(key, value)?,
            "head_reg_weight" => self.heads.reg_weight = scalar(key, value)?,
            "maen_epochs" => self.train.maen_epochs = scalar(key, value)?,
            "rpn_epochs" => self.train.rpn_epochs = scalar(key, value)?,
            "head_epochs" => self.train.head_epochs = scalar(key, value)?,
            "maen_batch" => self.train.maen_batch = scalar(key, value)?,
            "rpn_batch" => self.train.rpn_batch = scalar(key, value)?,
            "head_batch" => self.train.head_batch = scalar(key, value)?,
            "maen_learning_rate" => self.train.maen_learning_rate = scalar(key, value)?,
            "rpn_learning_rate" => self.train.rpn_learning_rate = scalar(key, value)?,
            "rpn_shared_learning_rate" => self.train.rpn_shared_learning_rate = scalar(key, value)?,
            "head_learning_rate" => self.train.head_learning_rate = scalar(key, value)?,
            "momentum" => self.train.momentum = scalar(key, value)?,
            "weight_decay" => self.train.weight_decay = scalar(key, value)?,
            "clip_norm" => self.train.clip_norm = scalar(key, value)?,
            "maen_decay_epoch" => self.train.maen_decay_epoch = scalar(key, value)?,
            "rpn_decay_epoch" => self.train.rpn_decay_epoch = scalar(key, value)?,
            "head_decay_epoch" => self.train.head_decay_epoch = scalar(key, value)?,
            _ => return Err(WsdlError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "seed" => self.train.seed.to_string(),
            "num_classes" => self.backbone.num_classes.to_string(),
            "image_size" => self.gen.image_size.to_string(),
            "train_count" => self.gen.train_count.to_string(),
            "test_count" => self.gen.test_count.to_string(),
            "object_min" => self.gen.object_min.to_string(),
            "object_max" => self.gen.object_max.to_string(),
            "clutter_density" => self.gen.clutter_density.to_string(),
            "glyph_cell" => self.gen.glyph_cell.to_string(),
            "stage_channels" => join(&self.backbone.stage_channels),
            "convs_per_stage" => self.backbone.convs_per_stage.to_string(),
            "cam_channels" => self.backbone.cam_channels.to_string(),
            "levels" => self.backbone.tap_levels.join(","),
            "anchor_scales" => join(&self.anchors.scales),
            "anchor_ratios" => join(&self.anchors.ratios),
            "anchor_stride" => self.anchors.stride.to_string(),
            "pos_iou" => self.anchors.pos_iou.to_string(),
            "neg_iou" => self.anchors.neg_iou.to_string(),
            "nms_iou" => self.anchors.nms_iou.to_string(),
            "pre_nms_top" => self.anchors.pre_nms_top.to_string(),
            "post_nms_top" => self.anchors.post_nms_top.to_string(),
            "rpn_lambda" => self.anchors.lambda.to_string(),
            "anchors_sampled" => self.anchors.anchors_per_image_sampled.to_string(),
            "roi_out" => format!("{},{}", self.heads.roi_out.0, self.heads.roi_out.1),
            "hidden" => self.heads.hidden.to_string(),
            "fg_iou" => self.heads.fg_iou.to_string(),
            "rois_per_image" => self.heads.rois_per_image.to_string(),
            "fg_fraction" => self.heads.fg_fraction.to_string(),
            "head_reg_weight" => self.heads.reg_weight.to_string(),
            "maen_epochs" => self.train.maen_epochs.to_string(),
            "rpn_epochs" => self.train.rpn_epochs.to_string(),
            "head_epochs" => self.train.head_epochs.to_string(),
            "maen_batch" => self.train.maen_batch.to_string(),
            "rpn_batch" => self.train.rpn_batch.to_string(),
            "head_batch" => self.train.head_batch.to_string(),
            "maen_learning_rate" => self.train.maen_learning_rate.to_string(),
            "rpn_learning_rate" => self.train.rpn_learning_rate.to_string(),
            "rpn_shared_learning_rate" => self.train.rpn_shared_learning_rate.to_string(),
            "head_learning_rate" => self.train.head_learning_rate.to_string(),
            "momentum" => self.train.momentum.to_string(),
            "weight_decay" => self.train.weight_decay.to_string(),
            "clip_norm" => self.train.clip_norm.to_string(),
            "maen_decay_epoch" => self.train.maen_decay_epoch.to_string(),
            "rpn_decay_epoch" => self.train.rpn_decay_epoch.to_string(),
            "head_decay_epoch" => self.train.head_decay_epoch.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Apply `key = value` lines over `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| WsdlError::Config(format!("{origin}:{}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| WsdlError::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, "<config>")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| WsdlError::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key).expect("listed key");
            writeln!(out, "{key} = {value}").expect("string write");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.backbone.validate()?;
        self.anchors.validate()?;
        self.heads.validate()?;
        self.train.validate()?;
        if self.anchors.stride != self.backbone.stride(crate::backbone::LATE_LEVEL) {
            return Err(WsdlError::Config(format!(
                "anchor_stride {} differs from the shared map stride {}",
                self.anchors.stride,
                self.backbone.stride(crate::backbone::LATE_LEVEL)
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("levels", "mid,late,cam").unwrap();
        cfg.set("rpn_learning_rate", "0.003").unwrap();
        cfg.set("num_classes", "5").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_key_is_settable_and_readable() {
        let mut cfg = RunConfig::default();
        for key in KEYS {
            let v = cfg.get(key).unwrap();
            cfg.set(key, &v).unwrap();
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = RunConfig::parse("seed = 3\nlearning_rat = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:") && msg.contains("learning_rat"), "{msg}");
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# run\n\nseed = 11  # override\n").unwrap();
        assert_eq!(cfg.seed(), 11);
        assert_eq!(cfg.gen.seed, 11);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("num_classes = 1").is_err());
        assert!(RunConfig::parse("head_learning_rate = -1").is_err());
        assert!(RunConfig::parse("levels = late,late").is_err());
        assert!(RunConfig::parse("maen_batch = x").is_err());
        assert!(RunConfig::parse("roi_out = 4").is_err());
    }
}
