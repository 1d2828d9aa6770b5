//! Stage-wise training (MAEN, then RPN on cloned convs, then per-level
//! heads on frozen features) and end-to-end inference.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{pseudo_boxes_batch, BBox};
use crate::backbone::{
    cam_forward, clone_shared_weights, init_maen, init_params, maen_head_specs, shared_forward, shared_param_specs,
    Checkpoint, ParamSpec, LATE_LEVEL,
};
use crate::config::RunConfig;
use crate::error::{Result, WsdlError};
use crate::heads::{
    foreground_scores, fuse_scores, head_forward, head_loss, head_prefix, head_specs, head_targets, roi_pool, vote_box,
    LevelPrediction, Prediction, RoiTarget, INPUT_SCALE, VOTE_IOU,
};
use crate::rpn::{
    decode_clipped, generate_anchors, label_anchors, propose, rpn_forward, rpn_head_specs, rpn_loss, BoxDelta,
    RPN_PREFIX,
};
use crate::synthdata::{images_to_tensor, RgbImage, TrainingView};
use crate::tensor::{argmax, bind_params, Graph, OptimState, ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub maen_epochs: usize,
    pub rpn_epochs: usize,
    pub head_epochs: usize,
    pub maen_batch: usize,
    /// Images per RPN minibatch; anchors per image follow `AnchorConfig`.
    pub rpn_batch: usize,
    /// Images per head minibatch; regions per image follow `HeadConfig`.
    pub head_batch: usize,
    pub maen_learning_rate: f64,
    /// Rate of the RPN's own layers in stage 2.
    pub rpn_learning_rate: f64,
    /// Rate of the cloned shared convolutions in stage 2.
    pub rpn_shared_learning_rate: f64,
    pub head_learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Bound on the joint gradient L2 norm per step; 0 disables clipping.
    pub clip_norm: f64,
    /// 1-based epoch from which each stage's rate is divided by 10.
    pub maen_decay_epoch: usize,
    pub rpn_decay_epoch: usize,
    pub head_decay_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            maen_epochs: 15,
            rpn_epochs: 10,
            head_epochs: 10,
            maen_batch: 20,
            rpn_batch: 10,
            head_batch: 10,
            maen_learning_rate: 0.05,
            rpn_learning_rate: 0.05,
            rpn_shared_learning_rate: 0.001,
            head_learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0005,
            clip_norm: 1.0,
            maen_decay_epoch: 14,
            rpn_decay_epoch: 8,
            head_decay_epoch: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.maen_learning_rate,
            self.rpn_learning_rate,
            self.rpn_shared_learning_rate,
            self.head_learning_rate,
        ];
        if rates.iter().any(|r| !(*r > 0.0)) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(WsdlError::Config(
                "learning rates must be positive, momentum in [0,1), weight_decay nonnegative".into(),
            ));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(WsdlError::Config("clip_norm must be nonnegative".into()));
        }
        if self.maen_batch == 0 || self.rpn_batch == 0 || self.head_batch == 0 {
            return Err(WsdlError::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    fn optimizer(&self, stage: Stage) -> Result<OptimState> {
        Ok(
            OptimState::new(self.rate(stage, 1), self.momentum, self.weight_decay)?
                .with_clip_norm(Some(self.clip_norm)),
        )
    }

    /// Learning rate of `stage` at a 1-based epoch, after step decay.
    pub fn rate(&self, stage: Stage, epoch: usize) -> f64 {
        let (base, decay_epoch) = match stage {
            Stage::Maen => (self.maen_learning_rate, self.maen_decay_epoch),
            Stage::Rpn => (self.rpn_learning_rate, self.rpn_decay_epoch),
            Stage::Heads => (self.head_learning_rate, self.head_decay_epoch),
        };
        if decay_epoch > 0 && epoch >= decay_epoch {
            base / 10.0
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Maen,
    Rpn,
    Heads,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Maen => "maen",
            Stage::Rpn => "rpn",
            Stage::Heads => "heads",
        }
    }
}

/// One record of the per-epoch training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub stage: Stage,
    /// Level trained, for the head stage.
    pub level: Option<String>,
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage={} epoch={} loss={:.6} acc={:.4}",
            self.stage.tag(),
            self.epoch,
            self.loss,
            self.acc
        )?;
        if let Some(level) = &self.level {
            write!(f, " level={level}")?;
        }
        Ok(())
    }
}

/// Independent stream seed for one consumer of the run seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn check_dataset(view: &TrainingView, config: &RunConfig) -> Result<()> {
    if view.distinct_labels() < 2 {
        return Err(WsdlError::Invalid(format!(
            "training needs at least 2 classes, dataset has {}",
            view.distinct_labels()
        )));
    }
    let classes = config.backbone.num_classes;
    for s in &view.samples {
        if s.label >= classes {
            return Err(WsdlError::LabelOutOfRange {
                label: s.label,
                classes,
            });
        }
        if s.image.width != config.backbone.input_w || s.image.height != config.backbone.input_h {
            return Err(WsdlError::shape(
                "train",
                format!(
                    "{} is {}x{}, expected {}x{}",
                    s.name, s.image.width, s.image.height, config.backbone.input_w, config.backbone.input_h
                ),
            ));
        }
    }
    Ok(())
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Stage 1: train the attention-extraction classifier.
pub fn train_maen(view: &TrainingView, config: &RunConfig, log: &mut dyn FnMut(&EpochLog)) -> Result<Checkpoint> {
    check_dataset(view, config)?;
    let bb = &config.backbone;
    let tc = &config.train;
    let mut params = init_maen(bb, derive_seed(tc.seed, "maen-init"));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, "maen-order"));
    let mut opt = tc.optimizer(Stage::Maen)?;
    for epoch in 1..=tc.maen_epochs {
        opt.learning_rate = tc.rate(Stage::Maen, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in shuffled(view.len(), &mut rng).chunks(tc.maen_batch) {
            let labels: Vec<usize> = chunk.iter().map(|&i| view.samples[i].label).collect();
            let mut g = Graph::new();
            let bound = bind_params(&mut g, &params, true);
            let x = g.leaf(view.batch(chunk));
            let stages = shared_forward(&mut g, &bound, bb, x)?;
            let (_, logits) = cam_forward(&mut g, &bound, stages[stages.len() - 1])?;
            let probs = g.softmax(logits)?;
            let loss = g.cross_entropy(probs, &labels)?;
            g.backward(loss)?;
            opt.step_all(&mut params, &g, &bound)?;
            loss_sum += g.value(loss).item() * chunk.len() as f64;
            let p = g.value(probs).data();
            let c = bb.num_classes;
            correct += labels
                .iter()
                .enumerate()
                .filter(|(r, &l)| argmax(&p[r * c..(r + 1) * c]) == l)
                .count();
        }
        log(&EpochLog {
            stage: Stage::Maen,
            level: None,
            epoch,
            loss: loss_sum / view.len() as f64,
            acc: correct as f64 / view.len() as f64,
        });
    }
    Ok(Checkpoint::new(Stage::Maen.tag(), params))
}

/// Per-level MAEN pseudo-boxes for every training image.
pub fn training_pseudo_boxes(
    view: &TrainingView,
    maen: &Checkpoint,
    config: &RunConfig,
) -> Result<Vec<Vec<(String, BBox)>>> {
    let indices: Vec<usize> = (0..view.len()).collect();
    let mut out = Vec::with_capacity(view.len());
    for chunk in indices.chunks(50) {
        out.extend(pseudo_boxes_batch(&view.batch(chunk), &maen.params, &config.backbone)?);
    }
    Ok(out)
}

/// Stage 2: clone MAEN's convolutional stages and train them jointly with
/// the RPN against the union of each image's pseudo-boxes.
pub fn train_rpn(
    view: &TrainingView,
    maen: &Checkpoint,
    pseudo: &[Vec<(String, BBox)>],
    config: &RunConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Checkpoint> {
    check_dataset(view, config)?;
    let bb = &config.backbone;
    let tc = &config.train;
    let ac = &config.anchors;
    let k = ac.anchors_per_cell();
    let head = rpn_head_specs(bb.late_channels(), k);
    let mut params = clone_shared_weights(maen, bb, RPN_PREFIX, &head, derive_seed(tc.seed, "rpn-init"))?.params;
    let (gh, gw) = bb.grid();
    let anchors = generate_anchors(gh, gw, ac);
    let per_image = anchors.len();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, "rpn-order"));
    let mut opt = tc.optimizer(Stage::Rpn)?;
    let shared_scale = tc.rpn_shared_learning_rate / tc.rpn_learning_rate;
    for epoch in 1..=tc.rpn_epochs {
        opt.learning_rate = tc.rate(Stage::Rpn, epoch);
        let (mut loss_sum, mut correct, mut sampled) = (0.0, 0usize, 0usize);
        for chunk in shuffled(view.len(), &mut rng).chunks(tc.rpn_batch) {
            let mut g = Graph::new();
            let bound = bind_params(&mut g, &params, true);
            let x = g.leaf(view.batch(chunk));
            let stages = shared_forward(&mut g, &bound, bb, x)?;
            let (obj, deltas) = rpn_forward(&mut g, &bound, stages[stages.len() - 1], k)?;
            let mut total = None;
            let mut batches = Vec::with_capacity(chunk.len());
            for (slot, &i) in chunk.iter().enumerate() {
                let boxes: Vec<BBox> = pseudo[i].iter().map(|(_, b)| *b).collect();
                let batch = label_anchors(&anchors, &boxes, ac, &mut rng)?;
                let loss = rpn_loss(&mut g, obj, deltas, &batch, ac, slot * per_image)?;
                total = Some(match total {
                    None => loss,
                    Some(t) => g.add(t, loss)?,
                });
                batches.push(batch);
            }
            let loss = g.scale(total.expect("non-empty chunk"), 1.0 / chunk.len() as f64)?;
            g.backward(loss)?;
            opt.step_all_scaled(&mut params, &g, &bound, |name| {
                if name.starts_with(RPN_PREFIX) {
                    1.0
                } else {
                    shared_scale
                }
            })?;
            loss_sum += g.value(loss).item() * chunk.len() as f64;
            let probs = g.value(obj).data();
            for (slot, batch) in batches.iter().enumerate() {
                for &a in &batch.sampled {
                    let positive = batch.labels[a] == crate::rpn::AnchorLabel::Positive;
                    let p_obj = probs[(slot * per_image + a) * 2 + 1];
                    correct += usize::from((p_obj > 0.5) == positive);
                }
                sampled += batch.sampled.len();
            }
        }
        log(&EpochLog {
            stage: Stage::Rpn,
            level: None,
            epoch,
            loss: loss_sum / view.len() as f64,
            acc: correct as f64 / sampled.max(1) as f64,
        });
    }
    Ok(Checkpoint::new(Stage::Rpn.tag(), params))
}

/// Shared map and proposals of a batch under frozen DLN parameters.
struct FrozenFeatures {
    /// `[C,h,w]` shared map per image.
    maps: Vec<Tensor>,
    proposals: Vec<Vec<BBox>>,
}

fn frozen_features(images: &Tensor, dln: &ParamSet, config: &RunConfig) -> Result<FrozenFeatures> {
    let bb = &config.backbone;
    let ac = &config.anchors;
    let k = ac.anchors_per_cell();
    let (gh, gw) = bb.grid();
    let anchors = generate_anchors(gh, gw, ac);
    let mut g = Graph::new();
    let bound = bind_params(&mut g, dln, false);
    let x = g.leaf(images.clone());
    let stages = shared_forward(&mut g, &bound, bb, x)?;
    let late = stages[stages.len() - 1];
    let (obj, deltas) = rpn_forward(&mut g, &bound, late, k)?;
    let n = images.dims()[0];
    let late_t = g.value(late);
    let plane = late_t.numel() / n;
    let d = late_t.dims().to_vec();
    let per = anchors.len();
    let obj_v = g.value(obj).data();
    let delta_v = g.value(deltas).data();
    let mut maps = Vec::with_capacity(n);
    let mut proposals = Vec::with_capacity(n);
    for i in 0..n {
        maps.push(Tensor::new(
            &d[1..],
            late_t.data()[i * plane..(i + 1) * plane].to_vec(),
        )?);
        let scores: Vec<f64> = (0..per).map(|a| obj_v[(i * per + a) * 2 + 1]).collect();
        let props = propose(
            &scores,
            &delta_v[i * per * 4..(i + 1) * per * 4],
            &anchors,
            ac,
            bb.input_w,
            bb.input_h,
        )?;
        proposals.push(props.into_iter().map(|(b, _)| b).collect());
    }
    Ok(FrozenFeatures { maps, proposals })
}

fn pooled_rows(map: &Tensor, boxes: impl Iterator<Item = BBox>, config: &RunConfig) -> Result<Vec<f64>> {
    let stride = config.backbone.stride(LATE_LEVEL);
    let mut rows = Vec::new();
    for b in boxes {
        rows.extend_from_slice(roi_pool(map, &b, stride, config.heads.roi_out)?.data());
    }
    Ok(rows)
}

fn prefixed(specs: Vec<ParamSpec>, prefix: &str) -> Vec<ParamSpec> {
    specs
        .into_iter()
        .map(|s| ParamSpec {
            name: format!("{prefix}.{}", s.name),
            ..s
        })
        .collect()
}

/// Stage 3: train one head per level on frozen shared features and RPN
/// proposals, each against its own level's pseudo-boxes.
pub fn train_heads(
    view: &TrainingView,
    dln: &Checkpoint,
    pseudo: &[Vec<(String, BBox)>],
    config: &RunConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<(String, Checkpoint)>> {
    check_dataset(view, config)?;
    let bb = &config.backbone;
    let tc = &config.train;
    let hc = &config.heads;
    let indices: Vec<usize> = (0..view.len()).collect();
    let mut maps = Vec::with_capacity(view.len());
    let mut proposals = Vec::with_capacity(view.len());
    for chunk in indices.chunks(50) {
        let f = frozen_features(&view.batch(chunk), &dln.params, config)?;
        maps.extend(f.maps);
        proposals.extend(f.proposals);
    }
    let input_len = hc.input_len(bb.late_channels());
    let mut heads = Vec::with_capacity(bb.tap_levels.len());
    for (li, level) in bb.tap_levels.iter().enumerate() {
        let prefix = head_prefix(level);
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &format!("{prefix}-init")));
        let mut params = init_params(&prefixed(head_specs(hc, bb.late_channels()), &prefix), &mut init_rng);
        // Root-mean-square of the pooled pseudo-box features sets the input scale.
        let (mut sq, mut count) = (0.0, 0usize);
        for (i, map) in maps.iter().enumerate() {
            let row = pooled_rows(map, std::iter::once(pseudo[i][li].1), config)?;
            sq += row.iter().map(|v| v * v).sum::<f64>();
            count += row.len();
        }
        let rms = (sq / count.max(1) as f64).sqrt();
        params.insert(
            format!("{prefix}.{INPUT_SCALE}"),
            Tensor::full(&[1], if rms > 0.0 { rms } else { 0.0 }),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &format!("{prefix}-order")));
        let mut opt = tc.optimizer(Stage::Heads)?;
        for epoch in 1..=tc.head_epochs {
            opt.learning_rate = tc.rate(Stage::Heads, epoch);
            let (mut loss_sum, mut correct, mut regions) = (0.0, 0usize, 0usize);
            for chunk in shuffled(view.len(), &mut rng).chunks(tc.head_batch) {
                let mut targets: Vec<RoiTarget> = Vec::new();
                let mut rows = Vec::new();
                for &i in chunk {
                    let (name, level_box) = &pseudo[i][li];
                    debug_assert_eq!(name, level);
                    let t = head_targets(
                        &proposals[i],
                        level_box,
                        view.samples[i].label,
                        (bb.input_w, bb.input_h),
                        hc,
                        &mut rng,
                    );
                    rows.extend(pooled_rows(&maps[i], t.iter().map(|r| r.bbox), config)?);
                    targets.extend(t);
                }
                let mut g = Graph::new();
                let bound = bind_params(&mut g, &params, true);
                let x = g.leaf(Tensor::new(&[targets.len(), input_len], rows)?);
                let (scores, deltas) = head_forward(&mut g, &bound, &prefix, x)?;
                let loss = head_loss(&mut g, scores, deltas, &targets, hc.reg_weight)?;
                g.backward(loss)?;
                opt.step_all(&mut params, &g, &bound)?;
                loss_sum += g.value(loss).item() * targets.len() as f64;
                let s = g.value(scores).data().to_vec();
                let width = hc.num_classes + 1;
                correct += targets
                    .iter()
                    .enumerate()
                    .filter(|(r, t)| argmax(&s[r * width..(r + 1) * width]) == t.class)
                    .count();
                regions += targets.len();
            }
            log(&EpochLog {
                stage: Stage::Heads,
                level: Some(level.clone()),
                epoch,
                loss: loss_sum / regions.max(1) as f64,
                acc: correct as f64 / regions.max(1) as f64,
            });
        }
        heads.push((level.clone(), Checkpoint::new(Stage::Heads.tag(), params)));
    }
    Ok(heads)
}

/// Checkpoints of all three stages plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub maen: Checkpoint,
    pub dln: Checkpoint,
    /// One head per configured level, in level order.
    pub heads: Vec<(String, Checkpoint)>,
}

pub const MAEN_FILE: &str = "maen.ckpt";
pub const DLN_FILE: &str = "dln.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

pub fn head_file(level: &str) -> String {
    format!("head_{level}.ckpt")
}

/// Run all three stages in order.
pub fn train_stagewise(
    view: &TrainingView,
    config: &RunConfig,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<TrainedModel> {
    config.validate()?;
    let maen = train_maen(view, config, log)?;
    let pseudo = training_pseudo_boxes(view, &maen, config)?;
    let dln = train_rpn(view, &maen, &pseudo, config, log)?;
    let heads = train_heads(view, &dln, &pseudo, config, log)?;
    Ok(TrainedModel {
        config: config.clone(),
        maen,
        dln,
        heads,
    })
}

fn expect_params(ckpt: &Checkpoint, specs: &[ParamSpec], what: &str) -> Result<()> {
    let missing: Vec<String> = specs
        .iter()
        .filter(|s| {
            ckpt.params
                .get(&s.name)
                .map(|t| t.dims() != s.dims.as_slice())
                .unwrap_or(true)
        })
        .map(|s| s.name.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(WsdlError::Checkpoint(format!(
            "{what} checkpoint does not match the recorded config: missing or misshapen {}",
            missing.join(", ")
        )))
    }
}

impl TrainedModel {
    /// Verify every checkpoint carries the parameters the config implies.
    pub fn check_compatible(&self) -> Result<()> {
        let bb = &self.config.backbone;
        let mut maen = shared_param_specs(bb);
        maen.extend(maen_head_specs(bb));
        expect_params(&self.maen, &maen, "maen")?;
        let mut dln = shared_param_specs(bb);
        dln.extend(prefixed(
            rpn_head_specs(bb.late_channels(), self.config.anchors.anchors_per_cell()),
            RPN_PREFIX,
        ));
        expect_params(&self.dln, &dln, "dln")?;
        let levels: Vec<&String> = self.heads.iter().map(|(l, _)| l).collect();
        if levels != bb.tap_levels.iter().collect::<Vec<_>>() {
            return Err(WsdlError::Checkpoint(format!(
                "heads {levels:?} do not match levels {:?}",
                bb.tap_levels
            )));
        }
        for (level, ckpt) in &self.heads {
            let specs = prefixed(head_specs(&self.config.heads, bb.late_channels()), &head_prefix(level));
            expect_params(ckpt, &specs, &format!("head {level}"))?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| WsdlError::io(dir, e))?;
        let cfg = dir.join(CONFIG_FILE);
        std::fs::write(&cfg, self.config.to_text()).map_err(|e| WsdlError::io(&cfg, e))?;
        self.maen.save(&dir.join(MAEN_FILE))?;
        self.dln.save(&dir.join(DLN_FILE))?;
        for (level, ckpt) in &self.heads {
            ckpt.save(&dir.join(head_file(level)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let maen = Checkpoint::load(&dir.join(MAEN_FILE))?;
        let dln = Checkpoint::load(&dir.join(DLN_FILE))?;
        let heads = config
            .backbone
            .tap_levels
            .iter()
            .map(|l| Ok((l.clone(), Checkpoint::load(&dir.join(head_file(l)))?)))
            .collect::<Result<Vec<_>>>()?;
        let model = TrainedModel {
            config,
            maen,
            dln,
            heads,
        };
        model.check_compatible()?;
        Ok(model)
    }

    pub fn dln(&self) -> Dln {
        let mut params = self.dln.params.clone();
        for (_, ckpt) in &self.heads {
            params.extend(ckpt.params.iter().map(|(k, v)| (k.clone(), v.clone())));
        }
        let bb = &self.config.backbone;
        let (gh, gw) = bb.grid();
        Dln {
            params,
            levels: bb.tap_levels.clone(),
            anchors: generate_anchors(gh, gw, &self.config.anchors),
            config: self.config.clone(),
        }
    }
}

/// Counts of network passes, for checking that the pathway is shared.
#[derive(Debug, Default)]
pub struct PassCounter {
    pub backbone: AtomicUsize,
    pub rpn: AtomicUsize,
    pub heads: AtomicUsize,
}

impl PassCounter {
    pub fn snapshot(&self) -> (usize, usize, usize) {
        (
            self.backbone.load(Ordering::Relaxed),
            self.rpn.load(Ordering::Relaxed),
            self.heads.load(Ordering::Relaxed),
        )
    }
}

/// Inference-time network: shared stages, RPN and every level head.
#[derive(Debug, Clone)]
pub struct Dln {
    params: ParamSet,
    levels: Vec<String>,
    anchors: Vec<BBox>,
    config: RunConfig,
}

/// Per-level outputs of one pathway evaluation.
struct LevelOutputs {
    regions: Vec<LevelPrediction>,
}

impl Dln {
    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    /// The same network restricted to a subset of its levels.
    pub fn with_levels(&self, levels: &[String]) -> Result<Dln> {
        if levels.is_empty() {
            return Err(WsdlError::Invalid("at least one level is required".into()));
        }
        if let Some(missing) = levels.iter().find(|l| !self.levels.contains(l)) {
            return Err(WsdlError::Invalid(format!(
                "level {missing:?} is not one of {:?}",
                self.levels
            )));
        }
        Ok(Dln {
            levels: levels.to_vec(),
            ..self.clone()
        })
    }

    fn pathway(&self, image: &RgbImage, levels: &[String], counter: Option<&PassCounter>) -> Result<LevelOutputs> {
        let bb = &self.config.backbone;
        let ac = &self.config.anchors;
        let hc = &self.config.heads;
        let mut g = Graph::new();
        let bound = bind_params(&mut g, &self.params, false);
        let x = g.leaf(images_to_tensor(std::iter::once(image)));
        let stages = shared_forward(&mut g, &bound, bb, x)?;
        let late = stages[stages.len() - 1];
        if let Some(c) = counter {
            c.backbone.fetch_add(1, Ordering::Relaxed);
        }
        let (obj, deltas) = rpn_forward(&mut g, &bound, late, ac.anchors_per_cell())?;
        if let Some(c) = counter {
            c.rpn.fetch_add(1, Ordering::Relaxed);
        }
        let scores: Vec<f64> = g.value(obj).data().chunks(2).map(|p| p[1]).collect();
        let props = propose(
            &scores,
            g.value(deltas).data(),
            &self.anchors,
            ac,
            bb.input_w,
            bb.input_h,
        )?;
        let mut weights: Vec<f64> = props.iter().map(|p| p.1).collect();
        let mut proposals: Vec<BBox> = props.into_iter().map(|(b, _)| b).collect();
        let whole = BBox::whole(bb.input_w as f64, bb.input_h as f64);
        if proposals.is_empty() {
            proposals.push(whole);
            weights.push(1.0);
        }
        let map = g.value(late).clone();
        let mut candidates = proposals.clone();
        candidates.push(whole);
        let rows = pooled_rows(&map, candidates.iter().copied(), &self.config)?;
        let pooled = g.leaf(Tensor::new(
            &[candidates.len(), hc.input_len(bb.late_channels())],
            rows,
        )?);
        let width = hc.num_classes + 1;
        let mut out = LevelOutputs {
            regions: Vec::with_capacity(levels.len()),
        };
        for level in levels {
            let (scores, deltas) = head_forward(&mut g, &bound, &head_prefix(level), pooled)?;
            if let Some(c) = counter {
                c.heads.fetch_add(1, Ordering::Relaxed);
            }
            let s = g.value(scores).data();
            let d = g.value(deltas).data();
            // The top-objectness proposal classifies; its box is the
            // objectness-weighted vote of the refined proposals around it.
            let refined: Vec<BBox> = proposals
                .iter()
                .enumerate()
                .map(|(r, p)| {
                    decode_clipped(
                        &BoxDelta::from_slice(&d[r * 4..r * 4 + 4]),
                        p,
                        bb.input_w as f64,
                        bb.input_h as f64,
                    )
                    .unwrap_or(*p)
                })
                .collect();
            let bbox = vote_box(&refined, &weights, 0, VOTE_IOU)?;
            let last = proposals.len();
            out.regions.push(LevelPrediction {
                level: level.clone(),
                bbox,
                scores: foreground_scores(&s[..width]),
                full_image: foreground_scores(&s[last * width..(last + 1) * width]),
            });
        }
        Ok(out)
    }

    fn assemble(&self, out: LevelOutputs) -> Result<Prediction> {
        let c = self.config.heads.num_classes;
        let n = out.regions.len() as f64;
        let mut full = vec![0.0; c];
        for r in &out.regions {
            full.iter_mut().zip(&r.full_image).for_each(|(f, x)| *f += x / n);
        }
        let per_level: Vec<Vec<f64>> = out.regions.iter().map(|r| r.scores.clone()).collect();
        let (fused, class) = fuse_scores(&per_level, &full)?;
        Ok(Prediction {
            levels: out.regions,
            full_image: full,
            fused,
            class,
        })
    }

    /// One shared backbone and RPN pass, then every head over the same map.
    pub fn infer(&self, image: &RgbImage) -> Result<Prediction> {
        self.infer_counted(image, None)
    }

    pub fn infer_counted(&self, image: &RgbImage, counter: Option<&PassCounter>) -> Result<Prediction> {
        let out = self.pathway(image, &self.levels, counter)?;
        self.assemble(out)
    }

    /// Each level through its own full network pass, as if the levels were
    /// separate models. Same outputs as [`Dln::infer`], more work.
    pub fn infer_separate(&self, image: &RgbImage, counter: Option<&PassCounter>) -> Result<Prediction> {
        let mut merged = LevelOutputs { regions: Vec::new() };
        for level in &self.levels {
            let out = self.pathway(image, std::slice::from_ref(level), counter)?;
            merged.regions.extend(out.regions);
        }
        self.assemble(merged)
    }

    /// Parallel inference over images with at most `threads` workers.
    pub fn infer_batch(&self, images: &[RgbImage], threads: usize) -> Result<Vec<Prediction>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| WsdlError::Invalid(format!("thread pool: {e}")))?;
        pool.install(|| images.par_iter().map(|img| self.infer(img)).collect())
    }
}

/// Worker count for parallel inference: `WSDL_THREADS` if set, else the
/// available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("WSDL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}
