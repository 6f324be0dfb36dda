use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use reinseg::config::{Preset, RunConfig};
use reinseg::datagen::{generate_protocol, load_dataset_dir, write_dataset_dir};
use reinseg::metrics::{evaluate_dirs, parse_scores_csv, rank_teams, save_mask, Aggregation, MetricReport};
use reinseg::train::{evaluate_samples, param_report, train, SegModel, TrainOptions};
use reinseg::Error;

#[derive(Parser)]
#[command(name = "reinseg", version, about = "Low-rank token adapters on frozen backbones for binary segmentation")]
struct Cli {
    /// Run everything on one thread (bitwise-reproducible output).
    #[arg(long, global = true)]
    single_thread: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML file with flat run keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> reinseg::Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        RunConfig::load(self.config.as_deref(), self.preset, &overrides)
    }
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train (3 domains) and test (6 domains) sets.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes the log and checkpoints into `--out`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Print the resolved run header and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Tile, predict and score a dataset directory with a checkpoint.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Override the binarization threshold stored in the checkpoint.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score prediction masks against ground-truth masks.
    Score {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// Write the CSV report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Aggregate by pooled pixel counts instead of per-image means.
        #[arg(long)]
        pooled: bool,
    },
    /// Print a leaderboard from a `name,score` CSV.
    Rank { scores: PathBuf },
    /// Per-group parameter counts and the trainable fraction.
    ParamReport {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.single_thread {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for bad input, 2 for a run that failed.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_validation() => 1,
        Some(_) => 2,
        None if e.downcast_ref::<Refusal>().is_some() => 1,
        None => 2,
    }
}

#[derive(Debug)]
struct Refusal(String);

impl std::fmt::Display for Refusal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Refusal {}

/// Creates `dir`, clearing it first under `force`; refuses to reuse a
/// non-empty directory otherwise.
fn prepare_dir(dir: &Path, force: bool) -> anyhow::Result<()> {
    let non_empty = dir.is_dir() && fs::read_dir(dir)?.next().is_some();
    if non_empty {
        if !force {
            return Err(Refusal(format!("{} exists and is not empty (use --force to replace it)", dir.display())).into());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData { cfg, out, force } => gen_data(&cfg.resolve()?, &out, force),
        Command::Train { cfg, out, force, dry_run } => train_cmd(&cfg.resolve()?, &out, force, dry_run),
        Command::Eval {
            checkpoint,
            dataset,
            out,
            force,
            threshold,
        } => eval_cmd(&checkpoint, &dataset, &out, force, threshold),
        Command::Score { pred_dir, gt_dir, out, pooled } => {
            let mode = if pooled { Aggregation::Pooled } else { Aggregation::PerImage };
            let report = evaluate_dirs(&pred_dir, &gt_dir, mode)?;
            match out {
                Some(path) => {
                    report.write_csv(&path)?;
                    print_aggregate(&report);
                }
                None => print!("{}", report.to_csv()),
            }
            Ok(())
        }
        Command::Rank { scores } => {
            let text = fs::read_to_string(&scores).map_err(|e| Error::Io { path: scores.clone(), source: e })?;
            for (i, (name, score)) in rank_teams(&parse_scores_csv(&text)?).iter().enumerate() {
                println!("{:>2}  {name:<24} {score:.4}", i + 1);
            }
            Ok(())
        }
        Command::ParamReport { cfg } => {
            let model = SegModel::new(&cfg.resolve()?)?;
            println!("{}", param_report(&model));
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> anyhow::Result<()> {
    prepare_dir(out, force)?;
    let p = generate_protocol(cfg.seed, cfg.image_size, cfg.train_per_domain, cfg.test_per_domain)?;
    write_dataset_dir(&p.train, &out.join("train"))?;
    write_dataset_dir(&p.test, &out.join("test"))?;
    println!(
        "wrote {} train images ({} domains) and {} test images to {}",
        p.train.len(),
        count_domains(p.train.iter().map(|s| s.domain_id.as_str())),
        p.test.len(),
        out.display()
    );
    Ok(())
}

fn count_domains<'a>(ids: impl Iterator<Item = &'a str>) -> usize {
    ids.collect::<std::collections::BTreeSet<_>>().len()
}

fn run_header(cfg: &RunConfig) -> String {
    let mut h = String::new();
    writeln!(h, "# preset {}", if cfg.preset == Preset::Paper { "paper" } else { "desk" }).unwrap();
    writeln!(
        h,
        "# iterations {}  batch_size {}  crop_size {}",
        cfg.iterations, cfg.batch_size, cfg.crop_size
    )
    .unwrap();
    writeln!(
        h,
        "# optimizer adamw  lr_backbone {:e}  lr_rein {:e}  lr_head {:e}  backbone_frozen {}",
        cfg.lr_backbone, cfg.lr_rein, cfg.lr_head, cfg.backbone_frozen
    )
    .unwrap();
    h
}

/// A generated dataset root holds `train/`; accept either the root or the
/// split directory itself.
fn train_dir(data: &Path) -> PathBuf {
    let t = data.join("train");
    if t.is_dir() {
        t
    } else {
        data.to_path_buf()
    }
}

fn train_cmd(cfg: &RunConfig, out: &Path, force: bool, dry_run: bool) -> anyhow::Result<()> {
    print!("{}", run_header(cfg));
    if dry_run {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let dir = train_dir(&cfg.data_dir);
    if !dir.is_dir() {
        bail!(Error::Ingestion(format!("dataset directory {} does not exist", cfg.data_dir.display())));
    }
    let data = load_dataset_dir(&dir)?;
    prepare_dir(out, force)?;
    fs::write(out.join("config.toml"), cfg.to_toml()).with_context(|| format!("writing {}", out.display()))?;
    let opts = TrainOptions {
        out_dir: Some(out.to_path_buf()),
        skip_validation: false,
        progress: true,
    };
    match train(cfg, &data, &opts) {
        Ok(o) => {
            let (first, last) = o.log.smoothed_endpoints(20);
            println!("loss {first:.4} -> {last:.4}");
            if let Some((iter, score, _)) = &o.best {
                println!("best validation score {score:.4} at iteration {iter} (best.rseg)");
            }
            println!("final checkpoint {}", out.join("final.rseg").display());
            Ok(())
        }
        Err(err @ Error::NonFiniteLoss { .. }) => {
            let Error::NonFiniteLoss { iteration, grad_norms } = &err else { unreachable!() };
            let mut dump = String::from("parameter,grad_norm\n");
            for (name, n) in grad_norms {
                writeln!(dump, "{name},{n}").unwrap();
            }
            let path = out.join("nan_diagnostics.csv");
            fs::write(&path, dump).with_context(|| format!("writing {}", path.display()))?;
            let msg = format!("training aborted at iteration {iteration}; gradient norms in {}", path.display());
            Err(anyhow::Error::new(err).context(msg))
        }
        Err(e) => Err(e.into()),
    }
}

fn eval_cmd(checkpoint: &Path, dataset: &Path, out: &Path, force: bool, threshold: Option<f64>) -> anyhow::Result<()> {
    let (mut model, _) = SegModel::load(checkpoint)?;
    if let Some(t) = threshold {
        model.set_threshold(t)?;
    }
    let dir = {
        let t = dataset.join("test");
        if t.is_dir() {
            t
        } else {
            dataset.to_path_buf()
        }
    };
    if !dir.is_dir() {
        bail!(Error::Ingestion(format!("dataset directory {} does not exist", dataset.display())));
    }
    let samples = load_dataset_dir(&dir)?;
    prepare_dir(out, force)?;
    let (preds, report) = evaluate_samples(&model, &samples)?;
    let masks = out.join("masks");
    fs::create_dir_all(&masks)?;
    for (s, p) in samples.iter().zip(&preds) {
        save_mask(p, &masks.join(format!("{}.png", s.sample_id)))?;
    }
    report.write_csv(&out.join("metrics.csv"))?;
    let mut by_domain: std::collections::BTreeMap<&str, Vec<_>> = Default::default();
    for (s, row) in samples.iter().zip(&report.rows) {
        by_domain.entry(s.domain_id.as_str()).or_default().push(row.clone());
    }
    println!("{:<10} {:>6} {:>8} {:>8} {:>8} {:>8}", "domain", "images", "dsc", "miou", "jsc", "score");
    for (d, rows) in by_domain {
        let n = rows.len();
        let r = MetricReport::from_rows(rows).aggregate;
        println!("{d:<10} {n:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", r.dsc, r.miou, r.jsc, r.score);
    }
    print_aggregate(&report);
    Ok(())
}

fn print_aggregate(report: &MetricReport) {
    let a = &report.aggregate;
    println!(
        "{:<10} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
        "AGGREGATE",
        report.rows.len(),
        a.dsc,
        a.miou,
        a.jsc,
        a.score
    );
}
