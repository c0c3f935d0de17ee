use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use hanet::data::io::{self as dio, ManifestEntry};
use hanet::data::synthetic::{self, SyntheticSpec};
use hanet::data::{dataset_stats, split_dataset, tile_pair, ImagePairRecord, PatchPair};
use hanet::metrics::MetricsReport;
use hanet::model::{Checkpoint, HaNet};
use hanet::pfbs::{full_plan, plan_csv, Policy};
use hanet::reporting::{export_curves, render_curves, render_error_map, sweep_table};
use hanet::trainer::{self, TrainConfig};

/// Bi-temporal change detection: data preparation, curriculum training,
/// evaluation and reporting.
#[derive(Parser)]
#[command(name = "hanet", version)]
struct Cli {
    /// Training configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Reproducible run: the seed must be fixed, batches follow the schedule order.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Model parameter count and cost; class balance of a dataset split if given.
    Stats(StatsArgs),
    /// Tiles a split into patches and writes its manifest and statistics.
    Tile(DataArgs),
    /// Partitions a manifest into training and validation manifests.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
    },
    /// Per-epoch foreground/background sample counts of a sampling policy.
    Plan(PlanArgs),
    /// Trains a model; writes checkpoint, history, curves and epoch manifests.
    Train(TrainArgs),
    /// Scores a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Full-resolution change map for one image pair.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        t2: PathBuf,
        /// Optional ground truth; adds an error map and metrics.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Colour-coded error map of a prediction against ground truth.
    Errmap {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Renders loss and precision curves from a history CSV.
    Curves {
        #[arg(long)]
        history: PathBuf,
    },
    /// Ranks metric reports given as `name=path/to/metrics.json`.
    Sweep {
        #[arg(required = true)]
        reports: Vec<String>,
    },
    /// Writes a procedural dataset in the directory convention.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root with `<split>/{A,B,label}` directories.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct PlanArgs {
    /// Overrides the configured policy, e.g. `fixed-15` or `linear-15`.
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Pool sizes; alternatively read from `--manifest`.
    #[arg(long, requires = "n_bg")]
    n_fg: Option<usize>,
    #[arg(long, requires = "n_fg")]
    n_bg: Option<usize>,
    #[arg(long, conflicts_with = "n_fg")]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    train_split: String,
    /// Validation split directory; when absent, `--val-fraction` of the
    /// training patches is held out instead.
    #[arg(long, default_value = "val")]
    val_split: String,
    #[arg(long, default_value_t = 0.0)]
    val_fraction: f64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    tile: usize,
    /// Number of scenes per split, as `train,val,test`.
    #[arg(long, default_value = "40,8,8")]
    counts: String,
    #[arg(long, default_value_t = 0.3)]
    foreground_fraction: f64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn sets_seed(text: &str) -> bool {
    text.lines()
        .filter_map(|l| l.split('#').next()?.split_once('='))
        .any(|(k, _)| k.trim() == "seed")
}

/// Configuration from `--config`, then `--seed` and `--deterministic`.
/// Without a fixed seed, non-deterministic runs draw one at random.
fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let text = match &cli.config {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = TrainConfig::from_kv_str(&text)?;
    let seed = match cli.seed {
        Some(s) => s,
        None if sets_seed(&text) => cfg.seed,
        None if cli.deterministic => bail!("--deterministic needs a seed from --seed or the config file"),
        None => rand::random(),
    };
    cfg.set("seed", &seed.to_string())?;
    cfg.deterministic |= cli.deterministic;
    Ok(cfg)
}

fn tile_split(root: &Path, split: &str, tile: usize) -> Result<(Vec<ImagePairRecord>, Vec<PatchPair>)> {
    let records = dio::load_split(root, split).with_context(|| format!("loading split `{split}` from {}", root.display()))?;
    let mut patches = Vec::new();
    for r in &records {
        patches.extend(tile_pair(r, tile)?);
    }
    if patches.is_empty() {
        bail!("split `{split}` yields no {tile} pixel patches");
    }
    Ok((records, patches))
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    Ok(&cli.out)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Stats(a) => stats(&cli, a),
        Command::Tile(a) => {
            let cfg = load_config(&cli)?;
            let (_, patches) = tile_split(&a.data, &a.split, cfg.model.tile)?;
            let out = out_dir(&cli)?;
            let path = out.join(format!("manifest_{}.csv", a.split));
            dio::write_manifest(&path, &patches.iter().map(ManifestEntry::from).collect::<Vec<_>>())?;
            let s = dataset_stats(&patches)?;
            dio::write_stats(out, &format!("stats_{}", a.split), &s)?;
            println!("{} patches ({} foreground) -> {}", patches.len(), s.foreground_patches, path.display());
            Ok(())
        }
        Command::Split { manifest, val_fraction } => {
            let cfg = load_config(&cli)?;
            let entries = dio::read_manifest(manifest)?;
            let (train, val) = split_dataset(&entries, *val_fraction, cfg.seed)?;
            let out = out_dir(&cli)?;
            dio::write_manifest(&out.join("train_manifest.csv"), &train)?;
            dio::write_manifest(&out.join("val_manifest.csv"), &val)?;
            println!("train {} / val {}", train.len(), val.len());
            Ok(())
        }
        Command::Plan(a) => plan(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Eval { checkpoint, data } => {
            let cfg = load_config(&cli)?;
            let ck = Checkpoint::load(checkpoint)?;
            let (_, patches) = tile_split(&data.data, &data.split, ck.config.tile)?;
            let report = trainer::evaluate(&ck, &patches, cfg.batch_size)?;
            let out = out_dir(&cli)?;
            let json = serde_json::to_string_pretty(&report.to_json())?;
            fs::write(out.join("metrics.json"), &json)?;
            println!("{json}");
            Ok(())
        }
        Command::Predict { checkpoint, t1, t2, gt } => {
            let cfg = load_config(&cli)?;
            let mut model = Checkpoint::load(checkpoint)?.to_model()?;
            let pred = trainer::predict_scene(&mut model, &dio::read_rgb(t1)?, &dio::read_rgb(t2)?, cfg.batch_size)?;
            let out = out_dir(&cli)?;
            dio::write_binary(&out.join("prediction.png"), &pred)?;
            if let Some(gt) = gt {
                let gt = dio::read_label(gt)?;
                render_error_map(pred.view(), gt.view())?.save(&out.join("error_map.png"))?;
                let report = MetricsReport::from_counts(hanet::metrics::confusion(pred.view(), gt.view())?);
                println!("{}", serde_json::to_string_pretty(&report.to_json())?);
            }
            info!("wrote {}", out.join("prediction.png").display());
            Ok(())
        }
        Command::Errmap { pred, gt } => {
            let map = render_error_map(dio::read_label(pred)?.view(), dio::read_label(gt)?.view())?;
            let path = out_dir(&cli)?.join("error_map.png");
            map.save(&path)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Curves { history } => {
            let (loss, precision) = render_curves(&fs::read_to_string(history)?)?;
            let out = out_dir(&cli)?;
            loss.save_with_format(out.join("loss.png"), image::ImageFormat::Png)?;
            precision.save_with_format(out.join("precision.png"), image::ImageFormat::Png)?;
            Ok(())
        }
        Command::Sweep { reports } => {
            let mut entries = Vec::new();
            for item in reports {
                let (name, path) = item.split_once('=').with_context(|| format!("expected name=path, got `{item}`"))?;
                let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
                entries.push((name.to_string(), MetricsReport::from_json(&value)?));
            }
            let table = sweep_table(&entries)?;
            let out = out_dir(&cli)?;
            fs::write(out.join("sweep.csv"), table.to_csv())?;
            fs::write(out.join("sweep.txt"), table.to_text())?;
            print!("{}", table.to_text());
            Ok(())
        }
        Command::Synth(a) => synth(&cli, a),
    }
}

fn stats(cli: &Cli, a: &StatsArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let model = HaNet::new(cfg.model.clone(), cfg.seed)?;
    let macs = model.macs();
    println!("parameters: {} ({:.3} M)", model.parameter_count(), model.parameter_count() as f64 / 1e6);
    println!(
        "cost per {}x{} pair: {:.3} GMACs ({:.3} GFLOPs at 2 FLOPs per MAC)",
        cfg.model.tile,
        cfg.model.tile,
        macs as f64 / 1e9,
        2.0 * macs as f64 / 1e9
    );
    if let Some(root) = &a.data {
        let (records, patches) = tile_split(root, &a.split, cfg.model.tile)?;
        let s = dataset_stats(&patches)?;
        println!("split {}: {} scenes, {} patches", a.split, records.len(), patches.len());
        print!("{}", s.to_text());
        dio::write_stats(out_dir(cli)?, &format!("stats_{}", a.split), &s)?;
    }
    Ok(())
}

fn plan(cli: &Cli, a: &PlanArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let policy = a.policy.unwrap_or(cfg.schedule.policy);
    policy.validate()?;
    let (n_fg, n_bg) = match (&a.manifest, a.n_fg, a.n_bg) {
        (Some(m), _, _) => {
            let entries = dio::read_manifest(m)?;
            let fg = entries.iter().filter(|e| e.category == hanet::data::PatchCategory::Foreground).count();
            (fg, entries.len() - fg)
        }
        (None, Some(f), Some(b)) => (f, b),
        _ => bail!("plan needs --n-fg and --n-bg, or --manifest"),
    };
    let csv = plan_csv(&full_plan(policy, a.epochs.unwrap_or(cfg.epochs), n_fg, n_bg));
    fs::write(out_dir(cli)?.join("plan.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let tile = cfg.model.tile;
    let (_, mut train_set) = tile_split(&a.data, &a.train_split, tile)?;
    let mut val_set = Vec::new();
    if a.data.join(&a.val_split).join("A").is_dir() {
        val_set = tile_split(&a.data, &a.val_split, tile)?.1;
    } else if a.val_fraction > 0.0 {
        (train_set, val_set) = split_dataset(&train_set, a.val_fraction, cfg.seed)?;
    } else {
        warn!("no validation data: the last epoch will be saved");
    }
    info!("seed {}, {} training / {} validation patches", cfg.seed, train_set.len(), val_set.len());

    let out = out_dir(cli)?;
    fs::write(out.join("config.txt"), cfg.to_kv_string())?;
    let manifests = trainer::epoch_manifests(&cfg, &train_set)?;
    let mut w = csv::Writer::from_path(out.join("epoch_manifests.csv"))?;
    w.write_record(["epoch", "position", "patch"])?;
    for (e, order) in manifests.iter().enumerate() {
        for (k, &i) in order.iter().enumerate() {
            w.write_record([(e + 1).to_string(), k.to_string(), train_set[i].id()])?;
        }
    }
    w.flush()?;

    let model = HaNet::new(cfg.model.clone(), cfg.seed)?;
    let outcome = trainer::train(&cfg, &train_set, &val_set, model)?;
    outcome.checkpoint.save(out.join("checkpoint.hanet"))?;
    export_curves(&outcome.history, out)?;
    match outcome.history.best_val_f1 {
        Some(f1) => println!("best epoch {} (val F1 {f1:.4})", outcome.history.best_epoch),
        None => println!("saved epoch {}", outcome.history.best_epoch),
    }
    Ok(())
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let counts: Vec<usize> = a.counts.split(',').map(|c| c.trim().parse()).collect::<std::result::Result<_, _>>()?;
    let [n_train, n_val, n_test] = counts[..] else {
        bail!("--counts needs three values: train,val,test");
    };
    let out = out_dir(cli)?;
    for (k, (split, n)) in [("train", n_train), ("val", n_val), ("test", n_test)].into_iter().enumerate() {
        let spec = SyntheticSpec {
            foreground_fraction: a.foreground_fraction,
            ..SyntheticSpec::new(a.tile, n, cfg.seed.wrapping_add(k as u64))
        };
        for p in synthetic::generate(&spec) {
            let rec = ImagePairRecord::new(format!("{split}_{}", p.parent_id), p.t1, p.t2, p.label)?;
            dio::save_record(out, split, &rec)?;
        }
    }
    println!("wrote {n_train}/{n_val}/{n_test} scenes to {}", out.display());
    Ok(())
}
