//! Command-line entry point: synth, train, eval, gradcheck, bench.
//!
//! Exit codes: 0 success, 1 failed verification, 2 usage, 3 contract or
//! input error, 4 training divergence.

use clap::{Args, Parser, Subcommand};
use lpgnet::data::synth::{SynthMode, SynthSpec};
use lpgnet::data::{load_feature_file, write_feature_file, DatasetSplit};
use lpgnet::error::LpgError;
use lpgnet::model::Ablation;
use lpgnet::train::{Checkpoint, TrainConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "lpgnet",
    version,
    about = "Multimodal emotion recognition with parallel attention and gated fusion",
    long_about = "Config precedence: built-in defaults, then --config JSON \
                  (flat keys matching TrainConfig), then explicit CLI flags. \
                  LPGNET_THREADS caps internal parallelism (default 1)."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic LPG-JSONL dataset (train/val/test + stats)
    Synth(SynthArgs),
    /// Train a model and write checkpoint, per-epoch CSV, report, manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint on a feature file
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences on a tiny model
    Gradcheck(GradcheckArgs),
    /// Compare forward/step latency and params against the stacked baseline
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..))]
    classes: u64,
    #[arg(long, default_value_t = 64)]
    f_t: usize,
    #[arg(long, default_value_t = 64)]
    f_a: usize,
    #[arg(long, default_value_t = 100)]
    train_dialogues: usize,
    #[arg(long, default_value_t = 20)]
    val_dialogues: usize,
    #[arg(long, default_value_t = 40)]
    test_dialogues: usize,
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    /// both | text-only-informative | audio-only-informative | complementary
    #[arg(long, default_value = "both")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// flat JSON config; CLI flags below override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// directory holding train.jsonl, val.jsonl, test.jsonl
    #[arg(long)]
    data: PathBuf,
    /// seeds to run; metrics are reported per seed plus mean/std
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// LPG-JSONL feature file
    #[arg(long)]
    data: PathBuf,
    /// also write the JSON report here
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// problem size; only "tiny" is defined
    #[arg(long, default_value = "tiny")]
    scale: String,
    /// "students" drops the distillation heads and checks teacher-only grads
    #[arg(long)]
    freeze: Option<String>,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "64")]
    dims: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16,64")]
    seq_lens: Vec<usize>,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(3..))]
    repeats: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    build: String,
    threads: usize,
    seeds: Vec<u64>,
    resolved_config: serde_json::Value,
    input_digests: BTreeMap<String, String>,
    outputs: Vec<String>,
    wall_seconds: f64,
}

fn threads_from_env() -> usize {
    std::env::var("LPGNET_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(1)
}

fn sha256_file(path: &Path) -> lpgnet::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(
    dir: &Path,
    command: &str,
    seeds: &[u64],
    resolved_config: serde_json::Value,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    started: Instant,
) -> lpgnet::Result<PathBuf> {
    let mut input_digests = BTreeMap::new();
    for p in inputs {
        input_digests.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = RunManifest {
        command: command.to_string(),
        build: format!("lpgnet {}", env!("CARGO_PKG_VERSION")),
        threads: threads_from_env(),
        seeds: seeds.to_vec(),
        resolved_config,
        input_digests,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

fn cmd_synth(args: &SynthArgs) -> lpgnet::Result<()> {
    let started = Instant::now();
    let mode = SynthMode::from_str(&args.mode).map_err(LpgError::contract)?;
    let spec = SynthSpec {
        classes: args.classes as usize,
        f_t: args.f_t,
        f_a: args.f_a,
        train_dialogues: args.train_dialogues,
        val_dialogues: args.val_dialogues,
        test_dialogues: args.test_dialogues,
        min_len: args.min_len,
        max_len: args.max_len,
        separation: args.separation,
        mode,
    };
    let data = lpgnet::data::synth::synth_generate(&spec, args.seed)?;
    std::fs::create_dir_all(&args.out)?;
    let mut outputs = Vec::new();
    let mut stats = BTreeMap::new();
    for split in ["train", "val", "test"] {
        let path = args.out.join(format!("{split}.jsonl"));
        let dialogues = data.split(split);
        write_feature_file(&path, &data.header, dialogues)?;
        let ds = lpgnet::data::Dataset {
            header: data.header.clone(),
            dialogues: dialogues.to_vec(),
        };
        stats.insert(
            split.to_string(),
            serde_json::json!({
                "dialogues": dialogues.len(),
                "utterances": ds.utterance_count(),
                "class_counts": ds.class_counts(),
                "labels": data.header.labels,
            }),
        );
        outputs.push(path);
    }
    let stats_path = args.out.join("stats.json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats)?)?;
    outputs.push(stats_path);
    write_manifest(
        &args.out,
        "synth",
        &[args.seed],
        serde_json::to_value(&spec)?,
        &[],
        &outputs,
        started,
    )?;
    for p in &outputs {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn load_split(dir: &Path) -> lpgnet::Result<(DatasetSplit, Vec<PathBuf>)> {
    let paths: Vec<PathBuf> =
        ["train", "val", "test"].iter().map(|s| dir.join(format!("{s}.jsonl"))).collect();
    let train = load_feature_file(&paths[0])?;
    let val = load_feature_file(&paths[1])?;
    let test = load_feature_file(&paths[2])?;
    for other in [&val.header, &test.header] {
        if other.num_classes != train.header.num_classes
            || other.f_t != train.header.f_t
            || other.f_a != train.header.f_a
        {
            return Err(LpgError::schema("split headers disagree".to_string()));
        }
    }
    Ok((
        DatasetSplit {
            header: train.header,
            train: train.dialogues,
            val: val.dialogues,
            test: test.dialogues,
        },
        paths,
    ))
}

fn cmd_train(args: &TrainArgs) -> lpgnet::Result<()> {
    let started = Instant::now();
    let mut config: TrainConfig = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    if let Some(a) = &args.ablation {
        config.ablation = Ablation::from_str(a).map_err(LpgError::contract)?;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    if let Some(h) = args.hidden {
        config.hidden = h;
    }
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    let seeds = args.seed.clone().unwrap_or_else(|| vec![config.seed]);

    // load inputs before touching the output directory: a missing data file
    // must leave no artifacts behind
    let (data, input_paths) = load_split(&args.data)?;
    std::fs::create_dir_all(&args.out)?;

    let mut outputs = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &seeds {
        let mut cfg = config.clone();
        cfg.seed = seed;
        let result = lpgnet::train::train(&cfg, &data)?;
        let test_report = lpgnet::train::evaluate(
            &mut result.checkpoint.model.clone(),
            &data.test,
            cfg.batch_size,
            data.header.num_classes,
        )?;

        let ckpt_path = args.out.join(format!("checkpoint-{seed}.ckpt"));
        result.checkpoint.save(&ckpt_path)?;
        outputs.push(ckpt_path);

        let csv_path = args.out.join(format!("epochs-{seed}.csv"));
        let mut csv = String::from("epoch,mean_train_loss,val_accuracy,val_macro_f1\n");
        for r in &result.history {
            csv.push_str(&format!(
                "{},{:.9},{:.9},{:.9}\n",
                r.epoch, r.mean_train_loss, r.val_accuracy, r.val_macro_f1
            ));
        }
        std::fs::write(&csv_path, csv)?;
        outputs.push(csv_path);

        println!(
            "seed {seed}: best epoch {} val_macro_f1 {:.4} test_acc {:.4} test_macro_f1 {:.4}",
            result.checkpoint.epoch,
            result.history[result.checkpoint.epoch].val_macro_f1,
            test_report.accuracy,
            test_report.macro_f1
        );
        per_seed.push(serde_json::json!({
            "seed": seed,
            "best_epoch": result.checkpoint.epoch,
            "test": test_report,
        }));
    }
    let mean_std = |key: &str| {
        let vals: Vec<f64> =
            per_seed.iter().map(|r| r["test"][key].as_f64().unwrap()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        (mean, var.sqrt())
    };
    let (acc_mean, acc_std) = mean_std("accuracy");
    let (f1_mean, f1_std) = mean_std("macro_f1");
    let report = serde_json::json!({
        "ablation": config.ablation.name(),
        "per_seed": per_seed,
        "test_accuracy_mean": acc_mean,
        "test_accuracy_std": acc_std,
        "test_macro_f1_mean": f1_mean,
        "test_macro_f1_std": f1_std,
    });
    let report_path = args.out.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    outputs.push(report_path);
    write_manifest(
        &args.out,
        "train",
        &seeds,
        serde_json::to_value(&config)?,
        &input_paths,
        &outputs,
        started,
    )?;
    println!(
        "test accuracy {:.4} ± {:.4}, macro-F1 {:.4} ± {:.4}",
        acc_mean, acc_std, f1_mean, f1_std
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> lpgnet::Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let data = load_feature_file(&args.data)?;
    if data.header.num_classes != ckpt.model.config.classes {
        return Err(LpgError::schema(format!(
            "data has {} classes, checkpoint expects {}",
            data.header.num_classes, ckpt.model.config.classes
        )));
    }
    let mut model = ckpt.model;
    let report = lpgnet::train::evaluate(
        &mut model,
        &data.dialogues,
        ckpt.train_config.batch_size,
        data.header.num_classes,
    )?;
    println!(
        "accuracy {:.4}  macro_f1 {:.4}  weighted_f1 {:.4}  ova_binary_accuracy {:.4}",
        report.accuracy, report.macro_f1, report.weighted_f1, report.ova_binary_accuracy
    );
    println!("class  precision  recall  f1  support");
    for (i, c) in report.per_class.iter().enumerate() {
        println!(
            "{:>5}  {:.4}  {:.4}  {:.4}  {}",
            data.header.labels.get(i).cloned().unwrap_or_else(|| i.to_string()),
            c.precision,
            c.recall,
            c.f1,
            c.support
        );
    }
    println!("confusion (rows = true):");
    for row in &report.confusion {
        println!("  {row:?}");
    }
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.json_out {
        std::fs::write(path, &json)?;
    } else {
        println!("{json}");
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> lpgnet::Result<bool> {
    if args.scale != "tiny" {
        return Err(LpgError::contract(format!("unknown scale {}", args.scale)));
    }
    if let Some(what) = &args.freeze {
        if what != "students" {
            return Err(LpgError::contract(format!("unknown freeze target {what}")));
        }
    }
    let settings = lpgnet::verify::GradCheckSettings {
        freeze_students: args.freeze.is_some(),
        eps: args.eps,
        seed: args.seed,
        ..Default::default()
    };
    let report = lpgnet::verify::gradcheck_full_loss(&settings)?;
    for (name, err) in &report.per_group {
        println!("{name:<24} worst_rel_err {err:.3e}");
    }
    let pass = report.max_rel_err < 1e-3;
    let verdict = if pass { "PASS" } else { "FAIL" };
    match &report.worst {
        Some((name, coord)) => println!(
            "{verdict} max_rel_err={:.3e} at {name}[{coord}] over {} coords",
            report.max_rel_err, report.coords_checked
        ),
        None => println!("{verdict} max_rel_err={:.3e}", report.max_rel_err),
    }
    Ok(pass)
}

fn cmd_bench(args: &BenchArgs) -> lpgnet::Result<()> {
    let rows =
        lpgnet::bench::run_bench(&args.dims, &args.seq_lens, args.repeats as usize, args.seed)?;
    println!("{}", lpgnet::bench::BenchRow::csv_header());
    for row in &rows {
        println!("{}", row.csv_line());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Synth(args) => cmd_synth(args).map(|_| true),
        Cmd::Train(args) => cmd_train(args).map(|_| true),
        Cmd::Eval(args) => cmd_eval(args).map(|_| true),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Bench(args) => cmd_bench(args).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ LpgError::Divergence { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
