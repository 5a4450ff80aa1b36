//! Acceptance gate: nine numbered criteria, each printing one PASS line.
//! Criteria 6 and 7 share one set of training runs (the full robustness
//! experiment), computed once behind a OnceLock.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use oadn_core::gradcheck::{op_suite, DEFAULT_EPS, DEFAULT_TOLERANCE};
use oadn_core::landmark::{
    compute_interest_points, modulate, threshold_points, AttentionStack, FlipTable, PointMapping,
    PointRule,
};
use oadn_core::model::{
    combined_loss, end_to_end_check, frb_partition, lab_forward, register_params, save_checkpoint,
    BackboneConfig, ConvSpec, OadnConfig, OadnParams, RegionConfig,
};
use oadn_core::synth::{generate_dataset, Dataset, DatasetConfig};
use oadn_core::train::{evaluate, train, Branch, EvalReport, TrainConfig, TrainOutcome};
use oadn_core::{Tape, Tensor};

fn tiny_cfg() -> OadnConfig {
    OadnConfig {
        backbone: BackboneConfig {
            input_size: (16, 16),
            in_channels: 1,
            layers: vec![
                ConvSpec { out_channels: 4, kernel: 3, stride: 2, padding: 1 },
                ConvSpec { out_channels: 4, kernel: 3, stride: 2, padding: 1 },
            ],
        },
        region: RegionConfig { m: 2, n: 2 },
        num_classes: 7,
        reduced_dim: 4,
        num_maps: 4,
        threshold: 0.6,
        sigma: 2.0,
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut worst_op = String::new();
    let mut worst = 0.0f64;
    for report in op_suite(DEFAULT_EPS, 20) {
        if report.max_rel_err > worst {
            worst = report.max_rel_err;
            worst_op = report.name.clone();
        }
        assert!(
            report.passed(DEFAULT_TOLERANCE),
            "op {} rel err {:.3e} exceeds 1e-4",
            report.name,
            report.max_rel_err
        );
    }
    let cfg = tiny_cfg();
    let params = OadnParams::init(&cfg, 11).unwrap();
    let (_, h_f, w_f) = cfg.backbone.feat_shape().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let maps = (0..cfg.num_maps)
        .map(|_| {
            let mut t = rand_tensor(&[h_f, w_f], &mut rng);
            for v in t.data_mut() {
                *v = v.abs();
            }
            t
        })
        .collect();
    let stack = AttentionStack { maps, sigma: cfg.sigma };
    let image = rand_tensor(&[1, 16, 16], &mut rng);
    let e2e = end_to_end_check(&cfg, &params, &stack, &image, 2, 0.5, DEFAULT_EPS).unwrap();
    assert!(e2e < DEFAULT_TOLERANCE, "end-to-end rel err {e2e:.3e}");
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "gradcheck took {elapsed:?}");
    println!(
        "criterion 1 (gradient correctness): PASS (worst op {worst_op} {worst:.2e}, end-to-end {e2e:.2e}, {elapsed:.2?})"
    );
}

#[test]
fn criterion_2_threshold_suite() {
    let mapping = PointMapping::default_mapping();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cases = 0usize;
    // random confidence fields: inclusive boundary + monotonicity
    for _ in 0..200 {
        let points: Vec<oadn_core::landmark::Landmark> = (0..68)
            .map(|i| oadn_core::landmark::Landmark {
                x: 8.0 + (i % 10) as f64 * 4.0,
                y: 8.0 + (i / 10) as f64 * 6.0,
                conf: rng.random_range(0.0..=1.0),
            })
            .collect();
        let lms = oadn_core::landmark::LandmarkSet::new(points, (64, 64)).unwrap();
        let pts = compute_interest_points(&lms, &mapping).unwrap();
        let t1: f64 = rng.random_range(0.0..=1.0);
        let t2 = (t1 + rng.random_range(0.0..0.4)).min(1.0);
        let lo = threshold_points(&pts, t1).unwrap();
        let hi = threshold_points(&pts, t2).unwrap();
        for ((p, l), h) in pts.points.iter().zip(&lo.points).zip(&hi.points) {
            assert_eq!(l.visible, p.conf >= t1, "inclusive boundary violated");
            assert!(!h.visible || l.visible, "monotonicity violated");
            cases += 1;
        }
        // exact boundary: conf == T is kept
        let at = threshold_points(&pts, pts.points[3].conf).unwrap();
        assert!(at.points[3].visible);
    }
    // generated fixtures at the default T=0.6: occluded records have their
    // covered points removed and clear points kept
    let ds = generate_dataset(&DatasetConfig {
        train_per_class: 1,
        test_per_class: 4,
        seed: 40,
        ..DatasetConfig::default()
    })
    .unwrap();
    for r in &ds.test {
        let occ = r.occluder.as_ref().expect("test split fully occluded");
        let pts = compute_interest_points(&r.landmarks, &mapping).unwrap();
        let pts = threshold_points(&pts, 0.6).unwrap();
        for (rule, p) in mapping.rules.iter().zip(&pts.points) {
            let src: Vec<usize> = match rule {
                PointRule::Select(i) => vec![*i],
                PointRule::Recompute(idx) => idx.clone(),
            };
            let any_covered = src
                .iter()
                .any(|&i| occ.bbox.contains(r.landmarks.points[i].x, r.landmarks.points[i].y));
            if any_covered {
                assert!(!p.visible, "covered point visible at T=0.6");
            } else {
                assert!(p.visible, "clear point removed at T=0.6");
            }
            cases += 1;
        }
    }
    println!("criterion 2 (threshold suite): PASS ({cases} property cases)");
}

#[test]
fn criterion_3_occlusion_locality() {
    let cfg = tiny_cfg();
    let params = OadnParams::init(&cfg, 9).unwrap();
    let (c_f, h_f, w_f) = cfg.backbone.feat_shape().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let lab_probs = |feat: &Tensor, stack: &AttentionStack| -> Vec<f64> {
        let mut tape = Tape::new();
        let pv = register_params(&mut tape, &params, false);
        let f = tape.leaf(feat.clone(), false);
        let out = lab_forward(&mut tape, f, stack, &pv).unwrap();
        tape.value(out.probs).data().to_vec()
    };
    for trial in 0..50 {
        let feat = {
            let mut t = rand_tensor(&[c_f, h_f, w_f], &mut rng);
            for v in t.data_mut() {
                *v = v.abs();
            }
            t
        };
        // random stack, then force a common zero set across every map
        let mut maps: Vec<Tensor> = (0..cfg.num_maps)
            .map(|_| {
                let mut t = rand_tensor(&[h_f, w_f], &mut rng);
                for v in t.data_mut() {
                    *v = v.abs();
                }
                t
            })
            .collect();
        let dead: Vec<usize> = (0..h_f * w_f)
            .filter(|_| rng.random_range(0.0..1.0) < 0.4)
            .collect();
        for m in &mut maps {
            for &i in &dead {
                m.data_mut()[i] = 0.0;
            }
        }
        let stack = AttentionStack { maps, sigma: cfg.sigma };
        let before = lab_probs(&feat, &stack);
        // arbitrary perturbation confined to the dead cells of every channel
        let mut poked = feat.clone();
        for ch in 0..c_f {
            for &i in &dead {
                poked.data_mut()[ch * h_f * w_f + i] += rng.random_range(-100.0..100.0);
            }
        }
        let after = lab_probs(&poked, &stack);
        assert_eq!(before, after, "trial {trial}: dead-cell perturbation leaked");
    }
    // an all-zero map pools to exactly the zero vector
    let feat = rand_tensor(&[c_f, h_f, w_f], &mut rng);
    let mut maps: Vec<Tensor> = (0..cfg.num_maps)
        .map(|_| rand_tensor(&[h_f, w_f], &mut rng))
        .collect();
    maps[1] = Tensor::zeros(&[h_f, w_f]);
    let stack = AttentionStack { maps, sigma: cfg.sigma };
    let mut tape = Tape::new();
    let f = tape.leaf(feat, false);
    let gated = modulate(&mut tape, f, &stack).unwrap();
    let pooled = tape.global_avg_pool(gated[1]).unwrap();
    assert!(tape.value(pooled).data().iter().all(|&v| v == 0.0));
    println!("criterion 3 (occlusion locality): PASS (50 pairs, exact equality)");
}

#[test]
fn criterion_4_partition_exhaustive() {
    let start = Instant::now();
    let mut checked = 0usize;
    for h in 1..=16usize {
        for w in 1..=16usize {
            for m in 1..=h {
                for n in 1..=w {
                    let rects = frb_partition(h, w, RegionConfig { m, n }).unwrap();
                    assert_eq!(rects.len(), h.div_ceil(m) * w.div_ceil(n));
                    let mut cover = vec![0u8; h * w];
                    for r in &rects {
                        for y in r.r0..r.r0 + r.h {
                            for x in r.c0..r.c0 + r.w {
                                cover[y * w + x] += 1;
                            }
                        }
                    }
                    assert!(cover.iter().all(|&c| c == 1), "h={h} w={w} m={m} n={n}");
                    checked += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10));
    println!("criterion 4 (partition correctness): PASS ({checked} grids, {elapsed:.2?})");
}

#[test]
fn criterion_5_loss_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 7;
    let k = 4;
    let rand_probs = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    for _ in 0..100 {
        let label = rng.random_range(0..c);
        let mut tape = Tape::new();
        let lab = tape.leaf(Tensor::new(vec![c], rand_probs(&mut rng)).unwrap(), false);
        let frb: Vec<_> = (0..k)
            .map(|_| tape.leaf(Tensor::new(vec![c], rand_probs(&mut rng)).unwrap(), false))
            .collect();
        let l_lab = tape.cross_entropy(lab, label).unwrap();
        let l_frb: f64 = frb
            .iter()
            .map(|&v| {
                let ce = tape.cross_entropy(v, label).unwrap();
                tape.value(ce).item()
            })
            .sum();
        let at1 = combined_loss(&mut tape, lab, &frb, label, 1.0).unwrap();
        assert!((tape.value(at1).item() - tape.value(l_lab).item()).abs() < 1e-12);
        let at0 = combined_loss(&mut tape, lab, &frb, label, 0.0).unwrap();
        assert!((tape.value(at0).item() - l_frb).abs() < 1e-12);
    }
    // uniform predictions, C=7, K=4, lambda=0.5: 0.5*ln7 + 0.5*4*ln7 = 2.5*ln7
    let mut tape = Tape::new();
    let uni = Tensor::full(&[c], 1.0 / c as f64);
    let lab = tape.leaf(uni.clone(), false);
    let frb: Vec<_> = (0..k).map(|_| tape.leaf(uni.clone(), false)).collect();
    let loss = combined_loss(&mut tape, lab, &frb, 3, 0.5).unwrap();
    let want = 2.5 * (7.0f64).ln();
    assert!((tape.value(loss).item() - want).abs() < 1e-9);
    println!("criterion 5 (loss endpoints): PASS (endpoints 1e-12, uniform closed form 1e-9)");
}

struct RunResult {
    fused: f64,
    regions_only: f64,
    duration: Duration,
}

const GAP_LR: f64 = 0.05;
const ABLATE_LR: f64 = 0.15;

struct Experiments {
    ds: Dataset,
    /// per seed: baseline (K=1, lambda=0)
    baseline: Vec<RunResult>,
    /// per seed: full model (4x4, lambda=0.5, T=0.6)
    flagship: Vec<RunResult>,
    /// per seed: ablation center cell (same model at the sweep lr)
    center: Vec<f64>,
    /// threshold axis extra cells: (t, per-seed fused)
    t_axis: Vec<(f64, Vec<f64>)>,
    /// lambda axis extra cells: (lambda, per-seed fused)
    l_axis: Vec<(f64, Vec<f64>)>,
}

fn run_once(
    ds: &Dataset,
    regions: RegionConfig,
    lambda: f64,
    threshold: f64,
    lr: f64,
    seed: u64,
) -> RunResult {
    let mut cfg = OadnConfig::default();
    cfg.region = regions;
    cfg.threshold = threshold;
    let tcfg = TrainConfig {
        epochs: 30,
        lr,
        lambda,
        seed,
        ..TrainConfig::default()
    };
    let mapping = PointMapping::default_mapping();
    let flip = FlipTable::default_table();
    let start = Instant::now();
    let outcome: TrainOutcome =
        train(&cfg, &tcfg, &ds.train, &ds.test, &mapping, &flip, |_| {}).unwrap();
    let duration = start.elapsed();
    let score = |branch: Branch| -> f64 {
        let report: EvalReport =
            evaluate(&ds.test, &outcome.best_params, &cfg, &mapping, branch).unwrap();
        report.total_accuracy()
    };
    RunResult {
        fused: score(Branch::Fused),
        regions_only: score(Branch::RegionsOnly),
        duration,
    }
}

fn experiments() -> &'static Experiments {
    static CELL: OnceLock<Experiments> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = generate_dataset(&DatasetConfig {
            train_per_class: 200,
            test_per_class: 50,
            occlude_train: 0.0,
            occlude_test: 1.0,
            seed: 7,
            ..DatasetConfig::default()
        })
        .unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (1400, 350));
        let seeds = [0u64, 1, 2];
        let four = RegionConfig { m: 4, n: 4 }; // K = 4 on the 8x8 map
        let one = RegionConfig { m: 8, n: 8 }; // K = 1
        // robustness gap (criterion 6) at lr where both models train cleanly
        let baseline: Vec<RunResult> = seeds
            .iter()
            .map(|&s| run_once(&ds, one, 0.0, 0.6, GAP_LR, s))
            .collect();
        let flagship: Vec<RunResult> = seeds
            .iter()
            .map(|&s| run_once(&ds, four, 0.5, 0.6, GAP_LR, s))
            .collect();
        // threshold sweep: T leaves the loss scale unchanged, so its cells
        // share the flagship's recipe (and the flagship runs double as the
        // T = 0.6 center)
        let t_axis = [0.0, 0.9]
            .into_iter()
            .map(|t| {
                (
                    t,
                    seeds
                        .iter()
                        .map(|&s| run_once(&ds, four, 0.5, t, GAP_LR, s).fused)
                        .collect(),
                )
            })
            .collect();
        // lambda sweep: the per-region loss is an unnormalized sum over K,
        // so the endpoint cells' loss scale (and effective step size)
        // differs by construction; the sweep shares one recipe at a rate
        // where the center is stable
        let center: Vec<f64> = seeds
            .iter()
            .map(|&s| run_once(&ds, four, 0.5, 0.6, ABLATE_LR, s).fused)
            .collect();
        let l_axis = [0.0, 1.0]
            .into_iter()
            .map(|l| {
                (
                    l,
                    seeds
                        .iter()
                        .map(|&s| run_once(&ds, four, l, 0.6, ABLATE_LR, s).fused)
                        .collect(),
                )
            })
            .collect();
        Experiments {
            ds,
            baseline,
            flagship,
            center,
            t_axis,
            l_axis,
        }
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_6_robustness_gap() {
    let exp = experiments();
    for r in exp.baseline.iter().chain(&exp.flagship) {
        assert!(
            r.duration < Duration::from_secs(600),
            "run took {:?}, budget is 10 CPU-minutes",
            r.duration
        );
    }
    // conservative baseline score: the better of its fused and single-head
    // readings (with lambda=0 the attention head is untrained, so fused
    // could only understate the baseline)
    let base: Vec<f64> = exp
        .baseline
        .iter()
        .map(|r| r.fused.max(r.regions_only))
        .collect();
    let full: Vec<f64> = exp.flagship.iter().map(|r| r.fused).collect();
    let gap = (mean(&full) - mean(&base)) * 100.0;
    assert!(
        gap >= 5.0,
        "fused accuracy gap {gap:.2} pts < 5 (baseline {base:?}, full {full:?})"
    );
    println!(
        "criterion 6 (robustness gap): PASS (baseline {:.3}, full {:.3}, gap {gap:.1} pts)",
        mean(&base),
        mean(&full)
    );
}

#[test]
fn criterion_7_ablation_shape() {
    let exp = experiments();
    let four = RegionConfig { m: 4, n: 4 };
    // each axis is its own sweep: its center cell shares that sweep's
    // recipe (the T = 0.6 center reuses the flagship runs). The center must
    // be >= both endpoints on seed means; a cell losing by <= 1 point
    // triggers a documented rerun with two more seeds on both cells before
    // the comparison is final.
    let t_center: Vec<f64> = exp.flagship.iter().map(|r| r.fused).collect();
    let check = |axis: &str, value: f64, center_accs: &[f64], accs: &[f64], lr: f64, cell_cfg: (f64, f64)| {
        let mut center = center_accs.to_vec();
        let mut cell = accs.to_vec();
        if mean(&center) < mean(&cell) && mean(&cell) - mean(&center) <= 0.01 {
            println!(
                "criterion 7 note: {axis}={value} within 1 point of center; rerunning with 5 seeds"
            );
            let (lambda, threshold) = cell_cfg;
            for s in [3u64, 4] {
                center.push(run_once(&exp.ds, four, 0.5, 0.6, lr, s).fused);
                cell.push(run_once(&exp.ds, four, lambda, threshold, lr, s).fused);
            }
        }
        assert!(
            mean(&center) >= mean(&cell),
            "center mean {:.4} < {axis}={value} mean {:.4}",
            mean(&center),
            mean(&cell)
        );
    };
    for (t, accs) in &exp.t_axis {
        check("T", *t, &t_center, accs, GAP_LR, (0.5, *t));
    }
    for (l, accs) in &exp.l_axis {
        check("lambda", *l, &exp.center, accs, ABLATE_LR, (*l, 0.6));
    }
    println!(
        "criterion 7 (ablation shape): PASS (T center {:.3}, T {:?}; lambda center {:.3}, lambda {:?})",
        mean(&t_center),
        exp.t_axis.iter().map(|(t, a)| (*t, mean(a))).collect::<Vec<_>>(),
        mean(&exp.center),
        exp.l_axis.iter().map(|(l, a)| (*l, mean(a))).collect::<Vec<_>>()
    );
}

#[test]
fn criterion_8_metric_identities() {
    // hand-built 3-class matrix: rows = true, cols = predicted
    let report = EvalReport {
        confusion: vec![vec![5, 2, 3], vec![0, 4, 0], vec![1, 1, 8]],
    };
    assert_eq!(report.total(), 24);
    assert_eq!(report.correct(), 17);
    assert_eq!(report.total_accuracy(), 17.0 / 24.0);
    let want_avg = (5.0 / 10.0 + 4.0 / 4.0 + 8.0 / 10.0) / 3.0;
    assert_eq!(report.avg_class_accuracy(), want_avg);
    assert_eq!(
        report.per_class_recall(),
        vec![Some(0.5), Some(1.0), Some(0.8)]
    );
    assert_eq!(
        report.per_class_precision(),
        vec![Some(5.0 / 6.0), Some(4.0 / 7.0), Some(8.0 / 11.0)]
    );
    // absent class excluded from the average, exactly
    let with_absent = EvalReport {
        confusion: vec![vec![3, 0], vec![0, 0]],
    };
    assert_eq!(with_absent.avg_class_accuracy(), 1.0);
    let empty = EvalReport {
        confusion: vec![vec![0; 2]; 2],
    };
    assert_eq!(empty.total_accuracy(), 0.0);
    println!("criterion 8 (metric identities): PASS (exact)");
}

#[test]
fn criterion_9_determinism() {
    let dcfg = DatasetConfig {
        train_per_class: 3,
        test_per_class: 2,
        seed: 123,
        ..DatasetConfig::default()
    };
    // dataset bytes
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    oadn_core::synth::save_dataset(&generate_dataset(&dcfg).unwrap(), dir_a.path()).unwrap();
    oadn_core::synth::save_dataset(&generate_dataset(&dcfg).unwrap(), dir_b.path()).unwrap();
    for name in [
        "manifest.txt",
        "train.images.bin",
        "train.landmarks.txt",
        "train.labels.txt",
        "train.occluders.txt",
        "test.images.bin",
        "test.landmarks.txt",
        "test.labels.txt",
        "test.occluders.txt",
    ] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical generations");
    }
    // training log + checkpoint bytes
    let ds = generate_dataset(&dcfg).unwrap();
    let cfg = tiny_cfg();
    let ds = {
        // regenerate at the tiny input size so the model matches
        let mut d = dcfg.clone();
        d.image_size = cfg.backbone.input_size.0;
        let _ = ds;
        generate_dataset(&d).unwrap()
    };
    let tcfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 0.02,
        seed: 9,
        ..TrainConfig::default()
    };
    let mapping = PointMapping::default_mapping();
    let flip = FlipTable::default_table();
    let run = || {
        let mut log = String::new();
        let out = train(&cfg, &tcfg, &ds.train, &ds.test, &mapping, &flip, |s| {
            log.push_str(&s.log_line());
            log.push('\n');
        })
        .unwrap();
        let path = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(path.path(), "determinism-check", &out.best_params).unwrap();
        let bytes = std::fs::read(path.path()).unwrap();
        (log, bytes)
    };
    let (log_a, ckpt_a) = run();
    let (log_b, ckpt_b) = run();
    assert_eq!(log_a, log_b, "training logs differ");
    assert_eq!(ckpt_a, ckpt_b, "checkpoint bytes differ");
    println!("criterion 9 (determinism): PASS (dataset, log, checkpoint byte-identical)");
}
