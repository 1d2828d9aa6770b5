//! Small staged convolutional network with tapped feature maps, the MAEN
//! classification head, and the binary checkpoint format.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, WsdlError};
use crate::tensor::{argmax, bind_params, BoundParams, Graph, ParamSet, Tensor, Var};

/// Output of the extra 3×3 convolution feeding GAP and the classifier.
pub const CAM_LEVEL: &str = "cam";
/// Output of the last shared stage; the map shared with the RPN.
pub const LATE_LEVEL: &str = "late";
/// Output of the second-to-last stage.
pub const MID_LEVEL: &str = "mid";

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub cam_channels: usize,
    pub num_classes: usize,
    pub tap_levels: Vec<String>,
}

impl BackboneConfig {
    pub fn new(num_classes: usize) -> Self {
        BackboneConfig {
            input_h: 64,
            input_w: 64,
            stage_channels: vec![16, 32, 64],
            convs_per_stage: 2,
            cam_channels: 128,
            num_classes,
            tap_levels: vec![LATE_LEVEL.into(), CAM_LEVEL.into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(WsdlError::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.stage_channels.len() < 2 || self.convs_per_stage == 0 || self.cam_channels == 0 {
            return Err(WsdlError::Config("backbone needs at least two stages".into()));
        }
        let reduction = 1 << self.stage_channels.len();
        if !self.input_h.is_multiple_of(reduction) || !self.input_w.is_multiple_of(reduction) {
            return Err(WsdlError::Config(format!(
                "input {}x{} not divisible by {reduction}",
                self.input_h, self.input_w
            )));
        }
        if self.tap_levels.is_empty() {
            return Err(WsdlError::Config("at least one tap level is required".into()));
        }
        let mut seen = BTreeSet::new();
        for level in &self.tap_levels {
            if ![MID_LEVEL, LATE_LEVEL, CAM_LEVEL].contains(&level.as_str()) {
                return Err(WsdlError::Config(format!("unknown tap level {level:?}")));
            }
            if !seen.insert(level) {
                return Err(WsdlError::Config(format!("duplicate tap level {level:?}")));
            }
        }
        Ok(())
    }

    /// Pixels per feature cell at a tap.
    pub fn stride(&self, level: &str) -> usize {
        let stages = self.stage_channels.len();
        match level {
            MID_LEVEL => 1 << (stages - 1),
            _ => 1 << stages,
        }
    }

    pub fn late_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }

    pub fn channels(&self, level: &str) -> usize {
        match level {
            MID_LEVEL => self.stage_channels[self.stage_channels.len() - 2],
            CAM_LEVEL => self.cam_channels,
            _ => self.late_channels(),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.stride(LATE_LEVEL);
        (self.input_h / s, self.input_w / s)
    }
}

fn conv_name(stage: usize, conv: usize, part: &str) -> String {
    format!("stage{}.conv{}.{part}", stage + 1, conv + 1)
}

/// Names of the convolutional parameters shared between MAEN and the DLN.
pub fn shared_param_names(config: &BackboneConfig) -> Vec<String> {
    let mut names = Vec::new();
    for s in 0..config.stage_channels.len() {
        for c in 0..config.convs_per_stage {
            names.push(conv_name(s, c, "weight"));
            names.push(conv_name(s, c, "bias"));
        }
    }
    names
}

/// Zero-mean uniform weights with bound `sqrt(6 / fan_in)`.
pub fn init_uniform(dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel = dims.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(dims, data).expect("dims are nonzero")
}

/// Shape and fan-in of a freshly initialized parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, dims: &[usize], fan_in: usize) -> Self {
        ParamSpec {
            name: name.into(),
            dims: dims.to_vec(),
            fan_in,
        }
    }

    /// Zero-initialized bias.
    pub fn bias(name: impl Into<String>, len: usize) -> Self {
        ParamSpec {
            name: name.into(),
            dims: vec![len],
            fan_in: 0,
        }
    }
}

pub fn init_params(specs: &[ParamSpec], rng: &mut impl Rng) -> ParamSet {
    specs
        .iter()
        .map(|s| {
            let t = if s.fan_in == 0 {
                Tensor::zeros(&s.dims)
            } else {
                init_uniform(&s.dims, s.fan_in, rng)
            };
            (s.name.clone(), t)
        })
        .collect()
}

pub fn shared_param_specs(config: &BackboneConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut in_ch = 3;
    for (s, &out_ch) in config.stage_channels.iter().enumerate() {
        for c in 0..config.convs_per_stage {
            specs.push(ParamSpec::weight(
                conv_name(s, c, "weight"),
                &[out_ch, in_ch, 3, 3],
                in_ch * 9,
            ));
            specs.push(ParamSpec::bias(conv_name(s, c, "bias"), out_ch));
            in_ch = out_ch;
        }
    }
    specs
}

pub fn maen_head_specs(config: &BackboneConfig) -> Vec<ParamSpec> {
    let late = config.late_channels();
    let cam = config.cam_channels;
    vec![
        ParamSpec::weight("cam.weight", &[cam, late, 3, 3], late * 9),
        ParamSpec::bias("cam.bias", cam),
        ParamSpec::weight("cls.weight", &[cam, config.num_classes], cam),
        ParamSpec::bias("cls.bias", config.num_classes),
    ]
}

/// Fresh MAEN parameters: shared stages plus cam conv and classifier.
pub fn init_maen(config: &BackboneConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = shared_param_specs(config);
    specs.extend(maen_head_specs(config));
    init_params(&specs, &mut rng)
}

fn param(bound: &BoundParams, name: &str) -> Result<Var> {
    bound
        .get(name)
        .copied()
        .ok_or_else(|| WsdlError::MissingParameters(vec![name.to_string()]))
}

/// Per-stage outputs (after pooling) of the shared convolutional stages.
pub fn shared_forward(g: &mut Graph, bound: &BoundParams, config: &BackboneConfig, images: Var) -> Result<Vec<Var>> {
    let d = g.dims(images).to_vec();
    if d.len() != 4 || d[1] != 3 || d[2] != config.input_h || d[3] != config.input_w {
        return Err(WsdlError::shape(
            "backbone_forward",
            format!("expected [N,3,{},{}] images, got {d:?}", config.input_h, config.input_w),
        ));
    }
    let mut x = images;
    let mut outputs = Vec::with_capacity(config.stage_channels.len());
    for s in 0..config.stage_channels.len() {
        for c in 0..config.convs_per_stage {
            let w = param(bound, &conv_name(s, c, "weight"))?;
            let b = param(bound, &conv_name(s, c, "bias"))?;
            x = g.conv2d(x, w, b, 1, 1)?;
            x = g.relu(x)?;
        }
        x = g.max_pool2d(x)?;
        outputs.push(x);
    }
    Ok(outputs)
}

/// Cam convolution (3×3, stride 1, pad 1) + relu, then GAP and the linear
/// classifier. Returns `(cam_features, logits)`.
pub fn cam_forward(g: &mut Graph, bound: &BoundParams, late: Var) -> Result<(Var, Var)> {
    let cam = g.conv2d(late, param(bound, "cam.weight")?, param(bound, "cam.bias")?, 1, 1)?;
    let cam = g.relu(cam)?;
    let pooled = g.global_avg_pool(cam)?;
    let logits = g.linear(pooled, param(bound, "cls.weight")?, param(bound, "cls.bias")?)?;
    Ok((cam, logits))
}

/// Tapped maps of one forward pass.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    /// Configured levels, in order.
    pub levels: Vec<String>,
    /// Map and stride per level.
    pub taps: BTreeMap<String, (Tensor, usize)>,
    pub cam_logits: Tensor,
    pub cam_class_weights: Tensor,
}

pub fn backbone_forward(images: &Tensor, params: &ParamSet, config: &BackboneConfig) -> Result<FeatureSet> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, false);
    let x = g.leaf(images.clone());
    let stages = shared_forward(&mut g, &bound, config, x)?;
    let late = stages[stages.len() - 1];
    let mid = stages[stages.len() - 2];
    let (cam, logits) = cam_forward(&mut g, &bound, late)?;
    let mut taps = BTreeMap::new();
    for level in &config.tap_levels {
        let v = match level.as_str() {
            MID_LEVEL => mid,
            LATE_LEVEL => late,
            _ => cam,
        };
        taps.insert(level.clone(), (g.value(v).clone(), config.stride(level)));
    }
    Ok(FeatureSet {
        levels: config.tap_levels.clone(),
        taps,
        cam_logits: g.value(logits).clone(),
        cam_class_weights: params["cls.weight"].clone(),
    })
}

/// Softmax class probabilities and per-row argmax (lowest index on ties).
pub fn maen_classify(images: &Tensor, params: &ParamSet, config: &BackboneConfig) -> Result<(Tensor, Vec<usize>)> {
    let mut g = Graph::new();
    let bound = bind_params(&mut g, params, false);
    let x = g.leaf(images.clone());
    let stages = shared_forward(&mut g, &bound, config, x)?;
    let (_, logits) = cam_forward(&mut g, &bound, stages[stages.len() - 1])?;
    let probs = g.softmax(logits)?;
    let probs = g.value(probs).clone();
    let c = probs.dims()[1];
    let predicted = probs.data().chunks(c).map(argmax).collect();
    Ok((probs, predicted))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WSDL";
pub const CHECKPOINT_VERSION: u32 = 1;
const STAGE_ENTRY_PREFIX: &str = "stage:";

/// Named parameters tagged with the training stage that produced them.
/// Values are held at 32-bit precision so the file round-trips exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: String,
    pub params: ParamSet,
}

fn round_to_f32(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
    t.zero_grad();
    t.set_requires_grad(false);
    t
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, params: ParamSet) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            stage: stage.into(),
            params: params.into_iter().map(|(k, v)| (k, round_to_f32(v))).collect(),
        }
    }

    /// Magic, version, entry count, then per entry the name, rank, dims
    /// and little-endian f32 values. The stage tag travels as an extra
    /// entry named `stage:<tag>` with dims `[0]`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32 + 1).to_le_bytes());
        let tag = format!("{STAGE_ENTRY_PREFIX}{}", self.stage);
        write_entry(&mut out, &tag, &[0], &[]);
        for (name, t) in &self.params {
            write_entry(&mut out, name, t.dims(), t.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(WsdlError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(WsdlError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut stage = None;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| WsdlError::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel * 4)?;
            let values: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            if let Some(tag) = name.strip_prefix(STAGE_ENTRY_PREFIX) {
                stage = Some(tag.to_string());
                continue;
            }
            let t = Tensor::new(&dims, values).map_err(|e| WsdlError::Checkpoint(format!("entry {name}: {e}")))?;
            if params.insert(name.clone(), t).is_some() {
                return Err(WsdlError::Checkpoint(format!("duplicate entry {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(WsdlError::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            version,
            stage: stage.ok_or_else(|| WsdlError::Checkpoint("missing stage tag".into()))?,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| WsdlError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| WsdlError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| WsdlError::parse(path, e.to_string()))
    }
}

fn write_entry(out: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| WsdlError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Copy the shared convolutional stages of `source` into a new checkpoint
/// and freshly initialize `head` parameters under `target_prefix`.
pub fn clone_shared_weights(
    source: &Checkpoint,
    config: &BackboneConfig,
    target_prefix: &str,
    head: &[ParamSpec],
    seed: u64,
) -> Result<Checkpoint> {
    let names = shared_param_names(config);
    let missing: Vec<String> = names
        .iter()
        .filter(|n| !source.params.contains_key(*n))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(WsdlError::MissingParameters(missing));
    }
    let mut params: ParamSet = names
        .into_iter()
        .map(|n| {
            let t = source.params[&n].clone();
            (n, t)
        })
        .collect();
    let prefixed: Vec<ParamSpec> = head
        .iter()
        .map(|s| ParamSpec {
            name: format!("{target_prefix}.{}", s.name),
            ..s.clone()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.extend(init_params(&prefixed, &mut rng));
    Ok(Checkpoint::new(target_prefix, params))
}
