use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use oadn_core::config::{get_or, parse_kv, KvMap};
use oadn_core::gradcheck::{op_suite, DEFAULT_EPS, DEFAULT_SEEDS, DEFAULT_TOLERANCE};
use oadn_core::landmark::{FlipTable, PointMapping};
use oadn_core::model::{
    end_to_end_check, load_model, save_checkpoint, BackboneConfig, ConvSpec, OadnConfig,
    OadnParams, RegionConfig,
};
use oadn_core::synth::{generate_dataset, load_dataset, save_dataset, DatasetConfig};
use oadn_core::train::{
    ablate, ablate_csv, evaluate, manifest_for_run, train, AblateAxis, Branch, TrainConfig,
};
use oadn_core::{OadnError, Result};

#[derive(Parser)]
#[command(name = "oadn", about = "Occlusion-adaptive two-branch expression classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOut {
    /// Output directory; defaults to $OADN_OUT_ROOT/<command> when unset.
    #[arg(long)]
    out: Option<PathBuf>,
    /// key = value config file; command-line flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ModelFlags {
    /// Landmark confidence threshold T.
    #[arg(long)]
    threshold: Option<f64>,
    /// Region grid as MxN block size on the feature map.
    #[arg(long)]
    regions: Option<String>,
    /// Attention map Gaussian width in input pixels.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Loss mix: lambda * attention + (1-lambda) * regions.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable horizontal-flip augmentation.
    #[arg(long)]
    no_flip: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic expression dataset on disk.
    GenData {
        #[command(flatten)]
        out: CommonOut,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
        #[arg(long)]
        occlude_train: Option<f64>,
        #[arg(long)]
        occlude_test: Option<f64>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: CommonOut,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        tflags: TrainFlags,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "fused")]
        branch: String,
    },
    /// Sweep one knob over a value grid and several seeds, CSV out.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: CommonOut,
        /// threshold | lambda | regions
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis.
        #[arg(long)]
        values: String,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        tflags: TrainFlags,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
    },
}

fn load_config_file(path: &Option<PathBuf>) -> Result<KvMap> {
    match path {
        None => Ok(KvMap::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| OadnError::io(format!("reading {}", p.display()), e))?;
            parse_kv(&text)
        }
    }
}

fn resolve_out(out: &Option<PathBuf>, command: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.clone(),
        None => match std::env::var_os("OADN_OUT_ROOT") {
            Some(root) => PathBuf::from(root).join(command),
            None => {
                return Err(OadnError::Config(
                    "--out not given and OADN_OUT_ROOT is unset".into(),
                ))
            }
        },
    };
    std::fs::create_dir_all(&dir)
        .map_err(|e| OadnError::io(format!("creating {}", dir.display()), e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| OadnError::io(format!("writing {}", path.display()), e))
}

fn model_config_from(kv: &KvMap, flags: &ModelFlags) -> Result<OadnConfig> {
    let mut cfg = OadnConfig::from_kv(kv)?;
    if let Some(t) = flags.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(OadnError::Config(format!("threshold {t} outside [0,1]")));
        }
        cfg.threshold = t;
    }
    if let Some(r) = &flags.regions {
        let (m, n) = r
            .split_once('x')
            .ok_or_else(|| OadnError::Config(format!("--regions {r:?}, expected MxN")))?;
        cfg.region = RegionConfig {
            m: m.parse().map_err(|e| OadnError::Config(format!("--regions: {e}")))?,
            n: n.parse().map_err(|e| OadnError::Config(format!("--regions: {e}")))?,
        };
    }
    if let Some(s) = flags.sigma {
        cfg.sigma = s;
    }
    cfg.num_regions()?;
    Ok(cfg)
}

fn train_config_from(kv: &KvMap, flags: &TrainFlags) -> Result<TrainConfig> {
    let mut tcfg = TrainConfig::from_kv(kv)?;
    if let Some(v) = flags.epochs {
        tcfg.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        tcfg.batch_size = v;
    }
    if let Some(v) = flags.lr {
        tcfg.lr = v;
    }
    if let Some(v) = flags.momentum {
        tcfg.momentum = v;
    }
    if let Some(v) = flags.weight_decay {
        tcfg.weight_decay = v;
    }
    if let Some(v) = flags.lambda {
        if !(0.0..=1.0).contains(&v) {
            return Err(OadnError::Config(format!("lambda {v} outside [0,1]")));
        }
        tcfg.lambda = v;
    }
    if let Some(v) = flags.seed {
        tcfg.seed = v;
    }
    if flags.no_flip {
        tcfg.flip_augment = false;
    }
    Ok(tcfg)
}

fn parse_csv_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|e| OadnError::Config(format!("{what} {v:?}: {e}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            train_per_class,
            test_per_class,
            occlude_train,
            occlude_test,
            image_size,
        } => {
            let kv = load_config_file(&out.config)?;
            let d = DatasetConfig::default();
            let cfg = DatasetConfig {
                seed: seed.map_or(get_or(&kv, "seed", d.seed)?, |v| v),
                train_per_class: train_per_class
                    .map_or(get_or(&kv, "train_per_class", d.train_per_class)?, |v| v),
                test_per_class: test_per_class
                    .map_or(get_or(&kv, "test_per_class", d.test_per_class)?, |v| v),
                occlude_train: occlude_train
                    .map_or(get_or(&kv, "occlude_train", d.occlude_train)?, |v| v),
                occlude_test: occlude_test
                    .map_or(get_or(&kv, "occlude_test", d.occlude_test)?, |v| v),
                image_size: image_size.map_or(get_or(&kv, "image_size", d.image_size)?, |v| v),
                ..d
            };
            let dir = resolve_out(&out.out, "gen-data")?;
            let ds = generate_dataset(&cfg)?;
            save_dataset(&ds, &dir)?;
            println!(
                "wrote {} train / {} test records to {}",
                ds.train.len(),
                ds.test.len(),
                dir.display()
            );
            Ok(())
        }
        Command::Train { data, out, model, tflags } => {
            let kv = load_config_file(&out.config)?;
            let cfg = model_config_from(&kv, &model)?;
            let tcfg = train_config_from(&kv, &tflags)?;
            let dir = resolve_out(&out.out, "train")?;
            let ds = load_dataset(&data)?;
            let mapping = PointMapping::default_mapping();
            let flip = FlipTable::default_table();
            let manifest = manifest_for_run(&cfg, &tcfg, &[("data", data.display().to_string())]);
            write_text(&dir.join("run_config.txt"), &manifest)?;
            let mut log = String::new();
            let outcome = train(&cfg, &tcfg, &ds.train, &ds.test, &mapping, &flip, |s| {
                let line = s.log_line();
                println!("{line}");
                log.push_str(&line);
                log.push('\n');
            })?;
            log.push_str(&format!(
                "best epoch {} val_acc {:.6}\n",
                outcome.best_epoch, outcome.best_val_acc
            ));
            write_text(&dir.join("train.log"), &log)?;
            let ckpt_manifest = manifest_for_run(
                &cfg,
                &tcfg,
                &[
                    ("best_epoch", outcome.best_epoch.to_string()),
                    ("best_val_acc", format!("{:.6}", outcome.best_val_acc)),
                ],
            );
            save_checkpoint(&dir.join("model.ckpt"), &ckpt_manifest, &outcome.best_params)?;
            println!(
                "best epoch {} val_acc {:.6}; checkpoint at {}",
                outcome.best_epoch,
                outcome.best_val_acc,
                dir.join("model.ckpt").display()
            );
            Ok(())
        }
        Command::Eval { data, model, split, branch } => {
            let branch = Branch::parse(&branch)?;
            let ds = load_dataset(&data)?;
            let records = match split.as_str() {
                "train" => &ds.train,
                "test" => &ds.test,
                s => return Err(OadnError::Config(format!("unknown split {s:?}"))),
            };
            let (cfg, params, _) = load_model(&model)?;
            let mapping = PointMapping::default_mapping();
            let report = evaluate(records, &params, &cfg, &mapping, branch)?;
            print!("{}", report.render());
            Ok(())
        }
        Command::Ablate { data, out, axis, values, seeds, model, tflags } => {
            let kv = load_config_file(&out.config)?;
            let cfg = model_config_from(&kv, &model)?;
            let tcfg = train_config_from(&kv, &tflags)?;
            let axis = AblateAxis::parse(&axis)?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            let seeds: Vec<u64> = parse_csv_list(&seeds, "seed")?;
            let dir = resolve_out(&out.out, "ablate")?;
            let ds = load_dataset(&data)?;
            let mapping = PointMapping::default_mapping();
            let flip = FlipTable::default_table();
            let manifest = manifest_for_run(
                &cfg,
                &tcfg,
                &[
                    ("data", data.display().to_string()),
                    ("axis", axis.name().to_string()),
                    ("values", values.join(",")),
                ],
            );
            write_text(&dir.join("run_config.txt"), &manifest)?;
            let rows = ablate(axis, &values, &seeds, &cfg, &tcfg, &ds, &mapping, &flip, |row| {
                println!(
                    "{}={} seed={} total_acc={:.6} avg_class_acc={:.6}",
                    axis.name(),
                    row.axis_value,
                    row.seed,
                    row.total_acc,
                    row.avg_class_acc
                );
            })?;
            write_text(&dir.join("ablation.csv"), &ablate_csv(&rows))?;
            println!("wrote {}", dir.join("ablation.csv").display());
            Ok(())
        }
        Command::Gradcheck { eps, tolerance, seeds } => {
            let mut failed = false;
            for report in op_suite(eps, seeds) {
                let ok = report.passed(tolerance);
                failed |= !ok;
                println!(
                    "{:<28} max_rel_err {:.3e} cases {:>4} {}",
                    report.name,
                    report.max_rel_err,
                    report.cases,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            // one small end-to-end pass through both branches
            let cfg = OadnConfig {
                backbone: BackboneConfig {
                    input_size: (16, 16),
                    in_channels: 1,
                    layers: vec![
                        ConvSpec { out_channels: 4, kernel: 3, stride: 2, padding: 1 },
                        ConvSpec { out_channels: 4, kernel: 3, stride: 2, padding: 1 },
                    ],
                },
                region: RegionConfig { m: 2, n: 2 },
                num_classes: 3,
                reduced_dim: 4,
                num_maps: 4,
                threshold: 0.6,
                sigma: 2.0,
            };
            let params = OadnParams::init(&cfg, 7)?;
            let (_, h_f, w_f) = cfg.backbone.feat_shape()?;
            let maps = (0..cfg.num_maps)
                .map(|i| {
                    let mut t = oadn_core::Tensor::full(&[h_f, w_f], 0.2);
                    t.data_mut()[i % (h_f * w_f)] = 1.0;
                    t
                })
                .collect();
            let stack = oadn_core::landmark::AttentionStack { maps, sigma: cfg.sigma };
            let mut img = oadn_core::Tensor::zeros(&[1, 16, 16]);
            for (i, v) in img.data_mut().iter_mut().enumerate() {
                *v = ((i * 37) % 101) as f64 / 101.0;
            }
            let worst = end_to_end_check(&cfg, &params, &stack, &img, 1, 0.5, eps)?;
            let ok = worst < tolerance;
            failed |= !ok;
            println!(
                "{:<28} max_rel_err {:.3e} cases    1 {}",
                "end_to_end",
                worst,
                if ok { "ok" } else { "FAIL" }
            );
            if failed {
                Err(OadnError::Numeric("gradient check failed".into()))
            } else {
                Ok(())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (OadnError::Config(_) | OadnError::Format(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
