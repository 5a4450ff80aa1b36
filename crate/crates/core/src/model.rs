//! The two-branch occlusion-adaptive classifier: a small conv backbone, the
//! landmark-guided attention branch (gate, pool, max-fuse, classify), the
//! facial region branch (partition into K blocks, one independent classifier
//! each), the combined loss, and fused inference.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{get_or, KvMap};
use crate::error::{OadnError, Result};
use crate::landmark::{
    build_attention_stack, compute_interest_points, modulate, threshold_points, AttentionStack,
    LandmarkSet, PointMapping,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    /// (H, W) of the input image.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    pub layers: Vec<ConvSpec>,
}

impl Default for BackboneConfig {
    /// 64x64 grayscale in, 8x8x32 features out. Strides 2,2,2,1: the last
    /// stage keeps stride 1 so the feature map stays large.
    fn default() -> Self {
        let layer = |out_channels, stride| ConvSpec {
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
        };
        BackboneConfig {
            input_size: (64, 64),
            in_channels: 1,
            layers: vec![layer(8, 2), layer(16, 2), layer(32, 2), layer(32, 1)],
        }
    }
}

impl BackboneConfig {
    /// Output geometry as (c, h_f, w_f).
    pub fn feat_shape(&self) -> Result<(usize, usize, usize)> {
        let (mut h, mut w) = self.input_size;
        let mut c = self.in_channels;
        for (i, l) in self.layers.iter().enumerate() {
            let out = |n: usize| -> Result<usize> {
                let padded = n + 2 * l.padding;
                if l.kernel > padded || l.stride == 0 {
                    return Err(OadnError::Config(format!(
                        "backbone layer {i} produces a non-positive output dim"
                    )));
                }
                Ok((padded - l.kernel) / l.stride + 1)
            };
            h = out(h)?;
            w = out(w)?;
            c = l.out_channels;
        }
        Ok((c, h, w))
    }

    pub fn layers_spec_string(&self) -> String {
        self.layers
            .iter()
            .map(|l| format!("{}:{}:{}:{}", l.out_channels, l.kernel, l.stride, l.padding))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_layers_spec(s: &str) -> Result<Vec<ConvSpec>> {
        s.split(',')
            .map(|part| {
                let nums: Vec<usize> = part
                    .split(':')
                    .map(|t| {
                        t.parse()
                            .map_err(|e| OadnError::Config(format!("layer spec {part:?}: {e}")))
                    })
                    .collect::<Result<_>>()?;
                if nums.len() != 4 {
                    return Err(OadnError::Config(format!(
                        "layer spec {part:?} needs out:kernel:stride:padding"
                    )));
                }
                Ok(ConvSpec {
                    out_channels: nums[0],
                    kernel: nums[1],
                    stride: nums[2],
                    padding: nums[3],
                })
            })
            .collect()
    }
}

/// Block geometry of the region branch: m x n feature cells per block,
/// K = ceil(h_f/m) * ceil(w_f/n) blocks tiling the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionConfig {
    pub m: usize,
    pub n: usize,
}

impl RegionConfig {
    pub fn validate(&self, h_f: usize, w_f: usize) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.m > h_f || self.n > w_f {
            return Err(OadnError::Config(format!(
                "region blocks {}x{} invalid for a {h_f}x{w_f} map",
                self.m, self.n
            )));
        }
        Ok(())
    }

    pub fn num_blocks(&self, h_f: usize, w_f: usize) -> usize {
        h_f.div_ceil(self.m) * w_f.div_ceil(self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRect {
    pub r0: usize,
    pub c0: usize,
    pub h: usize,
    pub w: usize,
}

/// Row-major non-overlapping tiling; edge blocks shrink when the map size
/// is not divisible by the block size.
pub fn frb_partition(h_f: usize, w_f: usize, region: RegionConfig) -> Result<Vec<BlockRect>> {
    region.validate(h_f, w_f)?;
    let mut rects = Vec::with_capacity(region.num_blocks(h_f, w_f));
    let mut r0 = 0;
    while r0 < h_f {
        let h = region.m.min(h_f - r0);
        let mut c0 = 0;
        while c0 < w_f {
            let w = region.n.min(w_f - c0);
            rects.push(BlockRect { r0, c0, h, w });
            c0 += region.n;
        }
        r0 += region.m;
    }
    Ok(rects)
}

/// Everything needed to build or reload the model.
#[derive(Debug, Clone, PartialEq)]
pub struct OadnConfig {
    pub backbone: BackboneConfig,
    pub region: RegionConfig,
    pub num_classes: usize,
    pub reduced_dim: usize,
    pub num_maps: usize,
    /// Landmark confidence threshold T.
    pub threshold: f64,
    /// Gaussian width at image scale.
    pub sigma: f64,
}

impl Default for OadnConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        let sigma = crate::landmark::default_sigma(backbone.input_size);
        OadnConfig {
            backbone,
            region: RegionConfig { m: 4, n: 4 },
            num_classes: 7,
            reduced_dim: 32,
            num_maps: crate::landmark::NUM_INTEREST_POINTS,
            threshold: 0.6,
            sigma,
        }
    }
}

impl OadnConfig {
    pub fn num_regions(&self) -> Result<usize> {
        let (_, h_f, w_f) = self.backbone.feat_shape()?;
        self.region.validate(h_f, w_f)?;
        Ok(self.region.num_blocks(h_f, w_f))
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("input_h".into(), self.backbone.input_size.0.to_string());
        kv.insert("input_w".into(), self.backbone.input_size.1.to_string());
        kv.insert("in_channels".into(), self.backbone.in_channels.to_string());
        kv.insert("backbone_layers".into(), self.backbone.layers_spec_string());
        kv.insert("region_m".into(), self.region.m.to_string());
        kv.insert("region_n".into(), self.region.n.to_string());
        kv.insert("classes".into(), self.num_classes.to_string());
        kv.insert("reduced_dim".into(), self.reduced_dim.to_string());
        kv.insert("num_maps".into(), self.num_maps.to_string());
        kv.insert("threshold".into(), self.threshold.to_string());
        kv.insert("sigma".into(), self.sigma.to_string());
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = OadnConfig::default();
        let backbone = BackboneConfig {
            input_size: (
                get_or(kv, "input_h", d.backbone.input_size.0)?,
                get_or(kv, "input_w", d.backbone.input_size.1)?,
            ),
            in_channels: get_or(kv, "in_channels", d.backbone.in_channels)?,
            layers: match kv.get("backbone_layers") {
                Some(s) => BackboneConfig::parse_layers_spec(s)?,
                None => d.backbone.layers.clone(),
            },
        };
        let cfg = OadnConfig {
            region: RegionConfig {
                m: get_or(kv, "region_m", d.region.m)?,
                n: get_or(kv, "region_n", d.region.n)?,
            },
            num_classes: get_or(kv, "classes", d.num_classes)?,
            reduced_dim: get_or(kv, "reduced_dim", d.reduced_dim)?,
            num_maps: get_or(kv, "num_maps", d.num_maps)?,
            threshold: get_or(kv, "threshold", d.threshold)?,
            sigma: get_or(kv, "sigma", d.sigma)?,
            backbone,
        };
        if !(0.0..=1.0).contains(&cfg.threshold) {
            return Err(OadnError::Config("threshold outside [0,1]".into()));
        }
        cfg.num_regions()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct LinearParams {
    /// [out, in]
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    /// [out, in, kh, kw]
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub reduce: LinearParams,
    pub classify: LinearParams,
}

/// All trainable weights: backbone conv stages, the attention-branch head,
/// and K independent region heads (no weight sharing among them).
#[derive(Debug, Clone)]
pub struct OadnParams {
    pub backbone: Vec<ConvParams>,
    pub lab: HeadParams,
    pub frb: Vec<HeadParams>,
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    // Box-Muller over the seeded stream
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos() * std);
        if out.len() < n {
            out.push(r * theta.sin() * std);
        }
    }
    out
}

fn linear_init(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> LinearParams {
    LinearParams {
        weight: Tensor::new(vec![out_dim, in_dim], he_normal(rng, in_dim, out_dim * in_dim))
            .unwrap(),
        bias: Tensor::zeros(&[out_dim]),
    }
}

fn head_init(rng: &mut ChaCha8Rng, c: usize, d_r: usize, classes: usize) -> HeadParams {
    HeadParams {
        reduce: linear_init(rng, d_r, c),
        classify: linear_init(rng, classes, d_r),
    }
}

impl OadnParams {
    pub fn init(cfg: &OadnConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, _, _) = cfg.backbone.feat_shape()?;
        let k = cfg.num_regions()?;
        let mut backbone = Vec::new();
        let mut in_c = cfg.backbone.in_channels;
        for l in &cfg.backbone.layers {
            let fan_in = in_c * l.kernel * l.kernel;
            let n = l.out_channels * fan_in;
            backbone.push(ConvParams {
                kernel: Tensor::new(
                    vec![l.out_channels, in_c, l.kernel, l.kernel],
                    he_normal(&mut rng, fan_in, n),
                )?,
                bias: Tensor::zeros(&[l.out_channels]),
            });
            in_c = l.out_channels;
        }
        let lab = head_init(&mut rng, c, cfg.reduced_dim, cfg.num_classes);
        let frb = (0..k)
            .map(|_| head_init(&mut rng, c, cfg.reduced_dim, cfg.num_classes))
            .collect();
        Ok(OadnParams { backbone, lab, frb })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, conv) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.kernel"), &conv.kernel));
            out.push((format!("backbone.{i}.bias"), &conv.bias));
        }
        fn head<'a>(name: &str, h: &'a HeadParams, out: &mut Vec<(String, &'a Tensor)>) {
            out.push((format!("{name}.reduce.weight"), &h.reduce.weight));
            out.push((format!("{name}.reduce.bias"), &h.reduce.bias));
            out.push((format!("{name}.classify.weight"), &h.classify.weight));
            out.push((format!("{name}.classify.bias"), &h.classify.bias));
        }
        head("lab", &self.lab, &mut out);
        for (i, h) in self.frb.iter().enumerate() {
            head(&format!("frb.{i}"), h, &mut out);
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, conv) in self.backbone.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.kernel"), &mut conv.kernel));
            out.push((format!("backbone.{i}.bias"), &mut conv.bias));
        }
        out.push(("lab.reduce.weight".into(), &mut self.lab.reduce.weight));
        out.push(("lab.reduce.bias".into(), &mut self.lab.reduce.bias));
        out.push(("lab.classify.weight".into(), &mut self.lab.classify.weight));
        out.push(("lab.classify.bias".into(), &mut self.lab.classify.bias));
        for (i, h) in self.frb.iter_mut().enumerate() {
            out.push((format!("frb.{i}.reduce.weight"), &mut h.reduce.weight));
            out.push((format!("frb.{i}.reduce.bias"), &mut h.reduce.bias));
            out.push((format!("frb.{i}.classify.weight"), &mut h.classify.weight));
            out.push((format!("frb.{i}.classify.bias"), &mut h.classify.bias));
        }
        out
    }

    pub fn from_named(cfg: &OadnConfig, mut named: std::collections::BTreeMap<String, Tensor>) -> Result<Self> {
        let mut template = OadnParams::init(cfg, 0)?;
        for (name, slot) in template.named_tensors_mut() {
            let t = named
                .remove(&name)
                .ok_or_else(|| OadnError::Format(format!("checkpoint missing tensor {name:?}")))?;
            if t.shape() != slot.shape() {
                return Err(OadnError::Shape(format!(
                    "checkpoint tensor {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = named.keys().next() {
            return Err(OadnError::Format(format!(
                "checkpoint has unexpected tensor {extra:?}"
            )));
        }
        Ok(template)
    }
}

struct HeadVars {
    rw: Var,
    rb: Var,
    cw: Var,
    cb: Var,
}

/// Parameter leaves registered on a tape for one forward/backward pass.
pub struct ParamVars {
    backbone: Vec<(Var, Var)>,
    lab: HeadVars,
    frb: Vec<HeadVars>,
}

impl ParamVars {
    /// Same order as [`OadnParams::named_tensors`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (k, b) in &self.backbone {
            out.push(*k);
            out.push(*b);
        }
        for h in std::iter::once(&self.lab).chain(&self.frb) {
            out.extend([h.rw, h.rb, h.cw, h.cb]);
        }
        out
    }
}

pub fn register_params(tape: &mut Tape, params: &OadnParams, requires_grad: bool) -> ParamVars {
    let head = |tape: &mut Tape, h: &HeadParams| HeadVars {
        rw: tape.leaf(h.reduce.weight.clone(), requires_grad),
        rb: tape.leaf(h.reduce.bias.clone(), requires_grad),
        cw: tape.leaf(h.classify.weight.clone(), requires_grad),
        cb: tape.leaf(h.classify.bias.clone(), requires_grad),
    };
    ParamVars {
        backbone: params
            .backbone
            .iter()
            .map(|c| {
                (
                    tape.leaf(c.kernel.clone(), requires_grad),
                    tape.leaf(c.bias.clone(), requires_grad),
                )
            })
            .collect(),
        lab: head(tape, &params.lab),
        frb: params.frb.iter().map(|h| head(tape, h)).collect(),
    }
}

/// Conv + bias + relu stages over a `[c_in, H, W]` image.
pub fn backbone_forward(
    tape: &mut Tape,
    image: Var,
    cfg: &BackboneConfig,
    pvars: &ParamVars,
) -> Result<Var> {
    let shape = tape.value(image).shape().to_vec();
    if shape != [cfg.in_channels, cfg.input_size.0, cfg.input_size.1] {
        return Err(OadnError::Shape(format!(
            "backbone input {shape:?}, config expects [{}, {}, {}]",
            cfg.in_channels, cfg.input_size.0, cfg.input_size.1
        )));
    }
    let mut x = image;
    for (l, (kernel, bias)) in cfg.layers.iter().zip(&pvars.backbone) {
        x = tape.conv2d(x, *kernel, l.stride, l.padding)?;
        x = tape.add_channel_bias(x, *bias)?;
        x = tape.relu(x)?;
    }
    Ok(x)
}

fn head_forward(tape: &mut Tape, x: Var, head: &HeadVars) -> Result<(Var, Var)> {
    let reduced = tape.linear(head.rw, head.rb, x, true)?;
    let logits = tape.linear(head.cw, head.cb, reduced, false)?;
    let probs = tape.softmax(logits)?;
    Ok((logits, probs))
}

pub struct LabOutput {
    pub logits: Var,
    pub probs: Var,
}

/// Attention branch: gate F by each map, pool, fuse by coordinate-wise max,
/// reduce, classify. All-zero stacks degrade to a bias-only prediction
/// because every pooled vector (and hence the max) is the zero vector.
pub fn lab_forward(
    tape: &mut Tape,
    feat: Var,
    stack: &AttentionStack,
    pvars: &ParamVars,
) -> Result<LabOutput> {
    let gated = modulate(tape, feat, stack)?;
    let pooled = gated
        .into_iter()
        .map(|g| tape.global_avg_pool(g))
        .collect::<Result<Vec<_>>>()?;
    let fused = tape.max_reduce_set(&pooled)?;
    let (logits, probs) = head_forward(tape, fused, &pvars.lab)?;
    Ok(LabOutput { logits, probs })
}

/// Region branch: per block, pool then classify with that block's own head.
/// Returns one probability row per block, row-major.
pub fn frb_forward(
    tape: &mut Tape,
    feat: Var,
    region: RegionConfig,
    pvars: &ParamVars,
) -> Result<Vec<Var>> {
    let s = tape.value(feat).shape().to_vec();
    let rects = frb_partition(s[1], s[2], region)?;
    if rects.len() != pvars.frb.len() {
        return Err(OadnError::Config(format!(
            "{} region heads registered for {} blocks",
            pvars.frb.len(),
            rects.len()
        )));
    }
    rects
        .iter()
        .zip(&pvars.frb)
        .map(|(r, head)| {
            let block = tape.block(feat, r.r0, r.c0, r.h, r.w)?;
            let pooled = tape.global_avg_pool(block)?;
            Ok(head_forward(tape, pooled, head)?.1)
        })
        .collect()
}

/// `lambda * L_attention + (1 - lambda) * L_regions`, where the region term
/// is the plain sum of the K per-block cross-entropies (no 1/K averaging).
pub fn combined_loss(
    tape: &mut Tape,
    lab_probs: Var,
    frb_probs: &[Var],
    label: usize,
    lambda: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(OadnError::Config(format!("lambda {lambda} outside [0,1]")));
    }
    let l_lab = tape.cross_entropy(lab_probs, label)?;
    let mut l_frb: Option<Var> = None;
    for &row in frb_probs {
        let ce = tape.cross_entropy(row, label)?;
        l_frb = Some(match l_frb {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    let l_frb = l_frb.ok_or_else(|| OadnError::Config("no region heads".into()))?;
    let a = tape.scale(l_lab, lambda)?;
    let b = tape.scale(l_frb, 1.0 - lambda)?;
    tape.add(a, b)
}

#[derive(Debug, Clone)]
pub struct BranchOutputs {
    pub lab_probs: Vec<f64>,
    pub frb_probs: Vec<Vec<f64>>,
    pub fused_probs: Vec<f64>,
}

impl BranchOutputs {
    /// Argmax with ties broken toward the lowest class index.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.fused_probs)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Builds the attention stack for one face from its landmarks.
pub fn attention_for(
    lms: &LandmarkSet,
    mapping: &PointMapping,
    cfg: &OadnConfig,
) -> Result<AttentionStack> {
    let pts = compute_interest_points(lms, mapping)?;
    let pts = threshold_points(&pts, cfg.threshold)?;
    let (_, h_f, w_f) = cfg.backbone.feat_shape()?;
    build_attention_stack(&pts, lms.image_size, (h_f, w_f), cfg.sigma)
}

/// Full-pipeline forward on a fresh tape; fused score is the average of the
/// attention branch probabilities and the mean region-branch row.
pub fn predict(
    image: &Tensor,
    lms: &LandmarkSet,
    params: &OadnParams,
    cfg: &OadnConfig,
    mapping: &PointMapping,
) -> Result<BranchOutputs> {
    let stack = attention_for(lms, mapping, cfg)?;
    let mut tape = Tape::new();
    let pvars = register_params(&mut tape, params, false);
    let img = as_model_input(image, &cfg.backbone)?;
    let img = tape.leaf(img, false);
    let feat = backbone_forward(&mut tape, img, &cfg.backbone, &pvars)?;
    let lab = lab_forward(&mut tape, feat, &stack, &pvars)?;
    let frb = frb_forward(&mut tape, feat, cfg.region, &pvars)?;
    let lab_probs = tape.value(lab.probs).data().to_vec();
    let frb_probs: Vec<Vec<f64>> = frb
        .iter()
        .map(|&v| tape.value(v).data().to_vec())
        .collect();
    Ok(fuse(lab_probs, frb_probs))
}

pub fn fuse(lab_probs: Vec<f64>, frb_probs: Vec<Vec<f64>>) -> BranchOutputs {
    let c = lab_probs.len();
    let k = frb_probs.len() as f64;
    let mut frb_mean = vec![0.0; c];
    for row in &frb_probs {
        for (m, &v) in frb_mean.iter_mut().zip(row) {
            *m += v / k;
        }
    }
    let fused_probs = lab_probs
        .iter()
        .zip(&frb_mean)
        .map(|(&a, &b)| 0.5 * a + 0.5 * b)
        .collect();
    BranchOutputs {
        lab_probs,
        frb_probs,
        fused_probs,
    }
}

/// Dataset images are stored `[H, W]`; the model wants `[c_in, H, W]`.
pub fn as_model_input(image: &Tensor, cfg: &BackboneConfig) -> Result<Tensor> {
    let want = [cfg.in_channels, cfg.input_size.0, cfg.input_size.1];
    match image.shape() {
        [h, w] if cfg.in_channels == 1 && [*h, *w] == want[1..] => {
            Tensor::new(want.to_vec(), image.data().to_vec())
        }
        s if s == want => Ok(image.clone()),
        s => Err(OadnError::Shape(format!(
            "image shape {s:?}, model expects {want:?}"
        ))),
    }
}

const CKPT_MAGIC: &[u8; 8] = b"OADNCKPT";
const CKPT_VERSION: u32 = 1;

/// Writes a versioned checkpoint: a key=value manifest followed by the
/// named parameter tensors in serialized form.
pub fn save_checkpoint(
    path: &Path,
    manifest: &str,
    params: &OadnParams,
) -> Result<()> {
    let ctx = format!("writing checkpoint {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(|e| OadnError::io(&ctx, e))?);
    let io = |e| OadnError::io(&ctx, e);
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
    let mbytes = manifest.as_bytes();
    w.write_all(&(mbytes.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(mbytes).map_err(io)?;
    let named = params.named_tensors();
    w.write_all(&(named.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, t) in named {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        t.write_to(&mut w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a checkpoint back as (manifest kv, named tensors).
pub fn load_checkpoint(path: &Path) -> Result<(KvMap, std::collections::BTreeMap<String, Tensor>)> {
    let ctx = format!("reading checkpoint {}", path.display());
    let mut r = BufReader::new(File::open(path).map_err(|e| OadnError::io(&ctx, e))?);
    let mut magic = [0u8; 8];
    let io = |e| OadnError::io(&ctx, e);
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CKPT_MAGIC {
        return Err(OadnError::Format("not a checkpoint file".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != CKPT_VERSION {
        return Err(OadnError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    r.read_exact(&mut b4).map_err(io)?;
    let mlen = u32::from_le_bytes(b4) as usize;
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes).map_err(io)?;
    let manifest = String::from_utf8(mbytes)
        .map_err(|e| OadnError::Format(format!("manifest not utf8: {e}")))?;
    let kv = crate::config::parse_kv(&manifest)?;
    r.read_exact(&mut b4).map_err(io)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut named = std::collections::BTreeMap::new();
    for _ in 0..count {
        r.read_exact(&mut b4).map_err(io)?;
        let nlen = u32::from_le_bytes(b4) as usize;
        let mut nbytes = vec![0u8; nlen];
        r.read_exact(&mut nbytes).map_err(io)?;
        let name = String::from_utf8(nbytes)
            .map_err(|e| OadnError::Format(format!("tensor name not utf8: {e}")))?;
        let t = Tensor::read_from(&mut r)?;
        named.insert(name, t);
    }
    Ok((kv, named))
}

pub fn load_model(path: &Path) -> Result<(OadnConfig, OadnParams, KvMap)> {
    let (kv, named) = load_checkpoint(path)?;
    let cfg = OadnConfig::from_kv(&kv)?;
    let params = OadnParams::from_named(&cfg, named)?;
    Ok((cfg, params, kv))
}


/// Finite-difference check of d(loss)/d(every parameter) for the full
/// Eq-style combined loss on one sample. Returns the worst relative error.
pub fn end_to_end_check(
    cfg: &OadnConfig,
    params: &OadnParams,
    stack: &AttentionStack,
    image: &Tensor,
    label: usize,
    lambda: f64,
    eps: f64,
) -> Result<f64> {
    let loss_of = |p: &OadnParams| -> Result<f64> {
        let mut tape = Tape::new();
        let pv = register_params(&mut tape, p, true);
        let img = tape.leaf(image.clone(), false);
        let feat = backbone_forward(&mut tape, img, &cfg.backbone, &pv)?;
        let lab = lab_forward(&mut tape, feat, stack, &pv)?;
        let frb = frb_forward(&mut tape, feat, cfg.region, &pv)?;
        let loss = combined_loss(&mut tape, lab.probs, &frb, label, lambda)?;
        Ok(tape.value(loss).item())
    };

    // analytic gradients
    let mut tape = Tape::new();
    let pv = register_params(&mut tape, params, true);
    let img = tape.leaf(image.clone(), false);
    let feat = backbone_forward(&mut tape, img, &cfg.backbone, &pv)?;
    let lab = lab_forward(&mut tape, feat, stack, &pv)?;
    let frb = frb_forward(&mut tape, feat, cfg.region, &pv)?;
    let loss = combined_loss(&mut tape, lab.probs, &frb, label, lambda)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = pv.ordered().iter().map(|&v| grads.grad(&tape, v)).collect();

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    let n_params = probe.named_tensors().len();
    for ti in 0..n_params {
        let numel = probe.named_tensors()[ti].1.numel();
        for i in 0..numel {
            let orig = probe.named_tensors()[ti].1.data()[i];
            probe.named_tensors_mut()[ti].1.data_mut()[i] = orig + eps;
            let plus = loss_of(&probe)?;
            probe.named_tensors_mut()[ti].1.data_mut()[i] = orig - eps;
            let minus = loss_of(&probe)?;
            probe.named_tensors_mut()[ti].1.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(crate::gradcheck::rel_err(analytic[ti].data()[i], numeric));
        }
    }
    Ok(worst)
}
