//! SGD training loop for the two-branch model, plus evaluation (confusion
//! matrix and derived metrics) and ablation sweeps.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{derive_seed, get_or, KvMap};
use crate::error::{OadnError, Result};
use crate::landmark::{AttentionStack, FlipTable, PointMapping};
use crate::model::{
    argmax, as_model_input, attention_for, backbone_forward, combined_loss, frb_forward, fuse,
    lab_forward, register_params, OadnConfig, OadnParams, RegionConfig,
};
use crate::synth::{Dataset, SampleRecord};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate is divided by `lr_decay` every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lambda: f64,
    pub flip_augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_decay: 10.0,
            lr_decay_every: 20,
            lambda: 0.5,
            flip_augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("epochs".into(), self.epochs.to_string());
        kv.insert("batch_size".into(), self.batch_size.to_string());
        kv.insert("lr".into(), self.lr.to_string());
        kv.insert("momentum".into(), self.momentum.to_string());
        kv.insert("weight_decay".into(), self.weight_decay.to_string());
        kv.insert("lr_decay".into(), self.lr_decay.to_string());
        kv.insert("lr_decay_every".into(), self.lr_decay_every.to_string());
        kv.insert("lambda".into(), self.lambda.to_string());
        kv.insert("flip_augment".into(), self.flip_augment.to_string());
        kv.insert("train_seed".into(), self.seed.to_string());
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: get_or(kv, "epochs", d.epochs)?,
            batch_size: get_or(kv, "batch_size", d.batch_size)?,
            lr: get_or(kv, "lr", d.lr)?,
            momentum: get_or(kv, "momentum", d.momentum)?,
            weight_decay: get_or(kv, "weight_decay", d.weight_decay)?,
            lr_decay: get_or(kv, "lr_decay", d.lr_decay)?,
            lr_decay_every: get_or(kv, "lr_decay_every", d.lr_decay_every)?,
            lambda: get_or(kv, "lambda", d.lambda)?,
            flip_augment: get_or(kv, "flip_augment", d.flip_augment)?,
            seed: get_or(kv, "train_seed", d.seed)?,
        };
        if cfg.batch_size == 0 || cfg.epochs == 0 {
            return Err(OadnError::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&cfg.lambda) {
            return Err(OadnError::Config(format!("lambda {} outside [0,1]", cfg.lambda)));
        }
        Ok(cfg)
    }
}

pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr / cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Classic momentum SGD with L2 regularization folded into the gradient:
/// v <- momentum*v + g + wd*p; p <- p - lr*v.
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &OadnParams) -> Self {
        SgdState {
            velocity: params
                .named_tensors()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }
}

pub fn sgd_step(
    params: &mut OadnParams,
    grads: &[Tensor],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut named = params.named_tensors_mut();
    if grads.len() != named.len() || state.velocity.len() != named.len() {
        return Err(OadnError::Shape(format!(
            "sgd_step: {} params, {} grads, {} velocity slots",
            named.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((v, g), (_, p)) in state.velocity.iter_mut().zip(grads).zip(named.iter_mut()) {
        for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *pi;
            *pi -= lr * *vi;
            if !pi.is_finite() {
                return Err(OadnError::Numeric(
                    "non-finite parameter after update; aborting".into(),
                ));
            }
        }
    }
    Ok(())
}

/// One training example with everything precomputed that does not depend on
/// the parameters: the channel-shaped input and the attention stack, for
/// both orientations when flipping is enabled.
struct PreparedSample {
    label: usize,
    orient: [Option<(Tensor, AttentionStack)>; 2],
}

fn flip_image(image: &Tensor) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            out[r * w + c] = image.data()[r * w + (w - 1 - c)];
        }
    }
    Tensor::new(vec![h, w], out)
}

fn prepare_samples(
    records: &[SampleRecord],
    cfg: &OadnConfig,
    mapping: &PointMapping,
    flip: Option<&FlipTable>,
) -> Result<Vec<PreparedSample>> {
    records
        .iter()
        .map(|r| {
            let img = as_model_input(&r.image, &cfg.backbone)?;
            let stack = attention_for(&r.landmarks, mapping, cfg)?;
            let flipped = match flip {
                Some(table) => {
                    let fimg = as_model_input(&flip_image(&r.image)?, &cfg.backbone)?;
                    let flms = r.landmarks.flipped(table);
                    Some((fimg, attention_for(&flms, mapping, cfg)?))
                }
                None => None,
            };
            Ok(PreparedSample {
                label: r.label,
                orient: [Some((img, stack)), flipped],
            })
        })
        .collect()
}

fn fused_accuracy_prepared(
    samples: &[PreparedSample],
    params: &OadnParams,
    cfg: &OadnConfig,
) -> Result<f64> {
    let mut correct = 0usize;
    for s in samples {
        let (img, stack) = s.orient[0].as_ref().unwrap();
        let mut tape = Tape::new();
        let pvars = register_params(&mut tape, params, false);
        let x = tape.leaf(img.clone(), false);
        let feat = backbone_forward(&mut tape, x, &cfg.backbone, &pvars)?;
        let lab = lab_forward(&mut tape, feat, stack, &pvars)?;
        let frb = frb_forward(&mut tape, feat, cfg.region, &pvars)?;
        let fused = fuse(
            tape.value(lab.probs).data().to_vec(),
            frb.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
        );
        if fused.predicted_class() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        format!(
            "epoch {} lr {:.6} loss {:.6} train_acc {:.6} val_acc {:.6}",
            self.epoch, self.lr, self.mean_loss, self.train_acc, self.val_acc
        )
    }
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub best_params: OadnParams,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub final_params: OadnParams,
    pub history: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn log(&self) -> String {
        let mut s = String::new();
        for e in &self.history {
            s.push_str(&e.log_line());
            s.push('\n');
        }
        s.push_str(&format!(
            "best epoch {} val_acc {:.6}\n",
            self.best_epoch, self.best_val_acc
        ));
        s
    }
}

/// Full training loop. Deterministic for fixed configs, data and seed: the
/// init, shuffles and flip coins all derive from `tcfg.seed`.
pub fn train(
    cfg: &OadnConfig,
    tcfg: &TrainConfig,
    train_recs: &[SampleRecord],
    val_recs: &[SampleRecord],
    mapping: &PointMapping,
    flip_table: &FlipTable,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    if train_recs.is_empty() {
        return Err(OadnError::Config("empty training set".into()));
    }
    let flip = tcfg.flip_augment.then_some(flip_table);
    let samples = prepare_samples(train_recs, cfg, mapping, flip)?;
    let val_samples = prepare_samples(val_recs, cfg, mapping, None)?;
    let mut params = OadnParams::init(cfg, derive_seed(tcfg.seed, "init"))?;
    let mut state = SgdState::new(&params);
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(usize, f64, OadnParams)> = None;

    for epoch in 0..tcfg.epochs {
        let lr = lr_at_epoch(tcfg, epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, &format!("shuffle/{epoch}")));
        order.shuffle(&mut shuffle_rng);
        let mut flip_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(tcfg.seed, &format!("flip/{epoch}")));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(tcfg.batch_size) {
            let mut tape = Tape::new();
            let pvars = register_params(&mut tape, &params, true);
            let mut batch_loss = None;
            for &idx in batch {
                let s = &samples[idx];
                let use_flip = s.orient[1].is_some() && flip_rng.random_range(0.0..1.0) < 0.5;
                let (img, stack) = s.orient[usize::from(use_flip)].as_ref().unwrap();
                let x = tape.leaf(img.clone(), false);
                let feat = backbone_forward(&mut tape, x, &cfg.backbone, &pvars)?;
                let lab = lab_forward(&mut tape, feat, stack, &pvars)?;
                let frb = frb_forward(&mut tape, feat, cfg.region, &pvars)?;
                let fused = fuse(
                    tape.value(lab.probs).data().to_vec(),
                    frb.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
                );
                if fused.predicted_class() == s.label {
                    correct += 1;
                }
                let loss = combined_loss(&mut tape, lab.probs, &frb, s.label, tcfg.lambda)?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => tape.add(acc, loss)?,
                    None => loss,
                });
            }
            let total = batch_loss.expect("non-empty batch");
            let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
            let loss_val = tape.value(mean).item();
            if !loss_val.is_finite() {
                return Err(OadnError::Numeric(format!(
                    "non-finite loss at epoch {epoch}; aborting"
                )));
            }
            loss_sum += loss_val * batch.len() as f64;
            let grads = tape.backward(mean)?;
            let grad_tensors: Vec<Tensor> = pvars
                .ordered()
                .into_iter()
                .map(|v| grads.grad(&tape, v))
                .collect();
            sgd_step(
                &mut params,
                &grad_tensors,
                &mut state,
                lr,
                tcfg.momentum,
                tcfg.weight_decay,
            )?;
        }

        let val_acc = if val_samples.is_empty() {
            0.0
        } else {
            fused_accuracy_prepared(&val_samples, &params, cfg)?
        };
        let stats = EpochStats {
            epoch,
            lr,
            mean_loss: loss_sum / samples.len() as f64,
            train_acc: correct as f64 / samples.len() as f64,
            val_acc,
        };
        on_epoch(&stats);
        if best.as_ref().map_or(true, |(_, acc, _)| val_acc > *acc) {
            best = Some((epoch, val_acc, params.clone()));
        }
        history.push(stats);
    }

    let (best_epoch, best_val_acc, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best_params,
        best_epoch,
        best_val_acc,
        final_params: params,
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Fused,
    AttentionOnly,
    RegionsOnly,
}

impl Branch {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Branch::Fused),
            "attention" => Ok(Branch::AttentionOnly),
            "regions" => Ok(Branch::RegionsOnly),
            _ => Err(OadnError::Config(format!(
                "unknown branch {s:?} (expected fused|attention|regions)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn total(&self) -> usize {
        self.confusion.iter().map(|r| r.iter().sum::<usize>()).sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum()
    }

    pub fn total_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.correct() as f64 / total as f64
    }

    /// Mean of per-class recall over the classes that actually appear;
    /// classes with no true samples are excluded rather than counted as 0.
    pub fn avg_class_accuracy(&self) -> f64 {
        let mut sum = 0.0;
        let mut present = 0usize;
        for (i, row) in self.confusion.iter().enumerate() {
            let row_total: usize = row.iter().sum();
            if row_total > 0 {
                sum += row[i] as f64 / row_total as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }

    /// Recall per class; None for classes with no true samples.
    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let t: usize = row.iter().sum();
                (t > 0).then(|| row[i] as f64 / t as f64)
            })
            .collect()
    }

    /// Precision per class; None for classes never predicted.
    pub fn per_class_precision(&self) -> Vec<Option<f64>> {
        let c = self.confusion.len();
        (0..c)
            .map(|j| {
                let t: usize = (0..c).map(|i| self.confusion[i][j]).sum();
                (t > 0).then(|| self.confusion[j][j] as f64 / t as f64)
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(" "));
            s.push('\n');
        }
        s.push_str(&format!(
            "total_acc {:.6}\navg_class_acc {:.6}\n",
            self.total_accuracy(),
            self.avg_class_accuracy()
        ));
        s
    }
}

pub fn evaluate(
    records: &[SampleRecord],
    params: &OadnParams,
    cfg: &OadnConfig,
    mapping: &PointMapping,
    branch: Branch,
) -> Result<EvalReport> {
    let c = cfg.num_classes;
    let mut confusion = vec![vec![0usize; c]; c];
    for r in records {
        if r.label >= c {
            return Err(OadnError::Index(format!(
                "label {} out of range for {c} classes",
                r.label
            )));
        }
        let out = crate::model::predict(&r.image, &r.landmarks, params, cfg, mapping)?;
        let probs = match branch {
            Branch::Fused => out.fused_probs.clone(),
            Branch::AttentionOnly => out.lab_probs.clone(),
            Branch::RegionsOnly => {
                let k = out.frb_probs.len() as f64;
                let mut mean = vec![0.0; c];
                for row in &out.frb_probs {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v / k;
                    }
                }
                mean
            }
        };
        confusion[r.label][argmax(&probs)] += 1;
    }
    Ok(EvalReport { confusion })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateAxis {
    /// Landmark confidence threshold T.
    Threshold,
    /// Loss mixing weight.
    Lambda,
    /// Region grid, values like "4x4".
    Regions,
}

impl AblateAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(AblateAxis::Threshold),
            "lambda" => Ok(AblateAxis::Lambda),
            "regions" => Ok(AblateAxis::Regions),
            _ => Err(OadnError::Config(format!(
                "unknown ablation axis {s:?} (expected threshold|lambda|regions)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblateAxis::Threshold => "threshold",
            AblateAxis::Lambda => "lambda",
            AblateAxis::Regions => "regions",
        }
    }
}

fn parse_region_value(s: &str) -> Result<RegionConfig> {
    let (m, n) = s
        .split_once('x')
        .ok_or_else(|| OadnError::Config(format!("region value {s:?}, expected MxN")))?;
    Ok(RegionConfig {
        m: m.parse()
            .map_err(|e| OadnError::Config(format!("region value {s:?}: {e}")))?,
        n: n.parse()
            .map_err(|e| OadnError::Config(format!("region value {s:?}: {e}")))?,
    })
}

pub fn apply_axis_value(
    axis: AblateAxis,
    value: &str,
    cfg: &mut OadnConfig,
    tcfg: &mut TrainConfig,
) -> Result<()> {
    match axis {
        AblateAxis::Threshold => {
            let t: f64 = value
                .parse()
                .map_err(|e| OadnError::Config(format!("threshold {value:?}: {e}")))?;
            if !(0.0..=1.0).contains(&t) {
                return Err(OadnError::Config(format!("threshold {t} outside [0,1]")));
            }
            cfg.threshold = t;
        }
        AblateAxis::Lambda => {
            let l: f64 = value
                .parse()
                .map_err(|e| OadnError::Config(format!("lambda {value:?}: {e}")))?;
            if !(0.0..=1.0).contains(&l) {
                return Err(OadnError::Config(format!("lambda {l} outside [0,1]")));
            }
            tcfg.lambda = l;
        }
        AblateAxis::Regions => cfg.region = parse_region_value(value)?,
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblateRow {
    pub axis_value: String,
    pub seed: u64,
    pub total_acc: f64,
    pub avg_class_acc: f64,
}

pub fn ablate_csv(rows: &[AblateRow]) -> String {
    let mut s = String::from("axis_value,seed,total_acc,avg_class_acc\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            r.axis_value, r.seed, r.total_acc, r.avg_class_acc
        ));
    }
    s
}

/// Trains one model per (value, seed) pair on the dataset's train split and
/// scores fused accuracy on its test split.
pub fn ablate(
    axis: AblateAxis,
    values: &[String],
    seeds: &[u64],
    base_cfg: &OadnConfig,
    base_tcfg: &TrainConfig,
    dataset: &Dataset,
    mapping: &PointMapping,
    flip_table: &FlipTable,
    mut on_row: impl FnMut(&AblateRow),
) -> Result<Vec<AblateRow>> {
    let mut rows = Vec::new();
    for value in values {
        for &seed in seeds {
            let mut cfg = base_cfg.clone();
            let mut tcfg = base_tcfg.clone();
            apply_axis_value(axis, value, &mut cfg, &mut tcfg)?;
            tcfg.seed = seed;
            let outcome = train(
                &cfg,
                &tcfg,
                &dataset.train,
                &dataset.test,
                mapping,
                flip_table,
                |_| {},
            )?;
            let report = evaluate(&dataset.test, &outcome.best_params, &cfg, mapping, Branch::Fused)?;
            let row = AblateRow {
                axis_value: value.clone(),
                seed,
                total_acc: report.total_accuracy(),
                avg_class_acc: report.avg_class_accuracy(),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Mean total accuracy per axis value, in the order the values first appear.
pub fn ablate_means(rows: &[AblateRow]) -> Vec<(String, f64)> {
    let mut order: Vec<String> = Vec::new();
    let mut sums: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    for r in rows {
        if !order.contains(&r.axis_value) {
            order.push(r.axis_value.clone());
        }
        let e = sums.entry(r.axis_value.clone()).or_insert((0.0, 0));
        e.0 += r.total_acc;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|v| {
            let (s, n) = sums[&v];
            (v, s / n as f64)
        })
        .collect()
}

pub fn manifest_for_run(
    cfg: &OadnConfig,
    tcfg: &TrainConfig,
    extra: &[(&str, String)],
) -> String {
    let mut kv = cfg.to_kv();
    kv.extend(tcfg.to_kv());
    for (k, v) in extra {
        kv.insert((*k).into(), v.clone());
    }
    let body = crate::config::format_kv(&kv);
    let hash = crate::config::config_hash(&body);
    kv.insert("config_hash".into(), hash);
    crate::config::format_kv(&kv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmark::{FlipTable, PointMapping};
    use crate::model::{BackboneConfig, ConvSpec};
    use crate::synth::{generate_dataset, DatasetConfig};

    fn tiny_cfg() -> OadnConfig {
        OadnConfig {
            backbone: BackboneConfig {
                input_size: (32, 32),
                in_channels: 1,
                layers: vec![
                    ConvSpec { out_channels: 4, kernel: 3, stride: 2, padding: 1 },
                    ConvSpec { out_channels: 8, kernel: 3, stride: 2, padding: 1 },
                ],
            },
            region: RegionConfig { m: 4, n: 4 },
            num_classes: 7,
            reduced_dim: 8,
            num_maps: crate::landmark::NUM_INTEREST_POINTS,
            threshold: 0.6,
            sigma: crate::landmark::default_sigma((32, 32)),
            ..OadnConfig::default()
        }
    }

    fn tiny_data(train_per_class: usize, test_per_class: usize, seed: u64) -> Dataset {
        generate_dataset(&DatasetConfig {
            train_per_class,
            test_per_class,
            image_size: 32,
            seed,
            occlude_train: 0.0,
            occlude_test: 1.0,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn lr_schedule_steps_down() {
        let tcfg = TrainConfig { lr: 0.1, lr_decay: 10.0, lr_decay_every: 20, ..Default::default() };
        assert_eq!(lr_at_epoch(&tcfg, 0), 0.1);
        assert_eq!(lr_at_epoch(&tcfg, 19), 0.1);
        assert!((lr_at_epoch(&tcfg, 20) - 0.01).abs() < 1e-15);
        assert!((lr_at_epoch(&tcfg, 40) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn sgd_matches_hand_computed_update() {
        let cfg = tiny_cfg();
        let mut params = OadnParams::init(&cfg, 1).unwrap();
        let p0 = params.named_tensors()[0].1.data()[0];
        let grads: Vec<Tensor> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::full(t.shape(), 0.5))
            .collect();
        let mut state = SgdState::new(&params);
        sgd_step(&mut params, &grads, &mut state, 0.1, 0.9, 0.0).unwrap();
        // v = 0.5, p = p0 - 0.05
        let p1 = params.named_tensors()[0].1.data()[0];
        assert!((p1 - (p0 - 0.05)).abs() < 1e-12);
        sgd_step(&mut params, &grads, &mut state, 0.1, 0.9, 0.0).unwrap();
        // v = 0.9*0.5 + 0.5 = 0.95, p = p1 - 0.095
        let p2 = params.named_tensors()[0].1.data()[0];
        assert!((p2 - (p1 - 0.095)).abs() < 1e-12);
    }

    #[test]
    fn sgd_weight_decay_pulls_toward_zero() {
        let cfg = tiny_cfg();
        let mut params = OadnParams::init(&cfg, 2).unwrap();
        let p0 = params.named_tensors()[0].1.data()[0];
        let grads: Vec<Tensor> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let mut state = SgdState::new(&params);
        sgd_step(&mut params, &grads, &mut state, 0.1, 0.0, 0.01).unwrap();
        let p1 = params.named_tensors()[0].1.data()[0];
        assert!((p1 - p0 * (1.0 - 0.1 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_loss_falls() {
        let cfg = tiny_cfg();
        let ds = tiny_data(4, 1, 11);
        let tcfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 0.02,
            seed: 5,
            ..Default::default()
        };
        let mapping = PointMapping::default_mapping();
        let flip = FlipTable::default_table();
        let run = || {
            train(&cfg, &tcfg, &ds.train, &ds.test, &mapping, &flip, |_| {}).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log(), b.log());
        for ((_, ta), (_, tb)) in a
            .final_params
            .named_tensors()
            .iter()
            .zip(b.final_params.named_tensors().iter())
        {
            assert_eq!(ta.to_bytes(), tb.to_bytes());
        }
        assert!(
            a.history.last().unwrap().mean_loss < a.history[0].mean_loss,
            "loss did not decrease: {:?}",
            a.history.iter().map(|h| h.mean_loss).collect::<Vec<_>>()
        );
    }

    #[test]
    fn evaluate_confusion_identities() {
        let cfg = tiny_cfg();
        let ds = tiny_data(1, 2, 3);
        let params = OadnParams::init(&cfg, 0).unwrap();
        let mapping = PointMapping::default_mapping();
        let report = evaluate(&ds.test, &params, &cfg, &mapping, Branch::Fused).unwrap();
        assert_eq!(report.total(), ds.test.len());
        let trace: usize = (0..7).map(|i| report.confusion[i][i]).sum();
        assert_eq!(report.correct(), trace);
        assert!((report.total_accuracy() - trace as f64 / ds.test.len() as f64).abs() < 1e-15);
        // every row sums to the per-class count
        for row in &report.confusion {
            assert_eq!(row.iter().sum::<usize>(), 2);
        }
    }

    #[test]
    fn avg_class_accuracy_skips_absent_classes() {
        let report = EvalReport {
            confusion: vec![
                vec![2, 0, 0],
                vec![0, 0, 0], // class never appears
                vec![1, 0, 1],
            ],
        };
        assert!((report.avg_class_accuracy() - (1.0 + 0.5) / 2.0).abs() < 1e-15);
        assert_eq!(report.per_class_recall()[1], None);
    }

    #[test]
    fn axis_values_route_to_the_right_knob() {
        let mut cfg = tiny_cfg();
        let mut tcfg = TrainConfig::default();
        apply_axis_value(AblateAxis::Threshold, "0.9", &mut cfg, &mut tcfg).unwrap();
        assert_eq!(cfg.threshold, 0.9);
        apply_axis_value(AblateAxis::Lambda, "0.25", &mut cfg, &mut tcfg).unwrap();
        assert_eq!(tcfg.lambda, 0.25);
        apply_axis_value(AblateAxis::Regions, "2x8", &mut cfg, &mut tcfg).unwrap();
        assert_eq!(cfg.region, RegionConfig { m: 2, n: 8 });
        assert!(apply_axis_value(AblateAxis::Threshold, "1.5", &mut cfg, &mut tcfg).is_err());
    }

    #[test]
    fn ablate_csv_shape() {
        let rows = vec![
            AblateRow { axis_value: "0.6".into(), seed: 1, total_acc: 0.5, avg_class_acc: 0.4 },
            AblateRow { axis_value: "0.9".into(), seed: 1, total_acc: 0.25, avg_class_acc: 0.2 },
        ];
        let csv = ablate_csv(&rows);
        assert!(csv.starts_with("axis_value,seed,total_acc,avg_class_acc\n"));
        assert_eq!(csv.lines().count(), 3);
        let means = ablate_means(&rows);
        assert_eq!(means[0], ("0.6".into(), 0.5));
    }
}
