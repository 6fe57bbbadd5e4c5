//! `blxs`: pretrain, fine-tune, sweep and report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use blxs_core::adapters::{count_table, Method, ShapePreset};
use blxs_core::harness::checkpoint::encode_backbone;
use blxs_core::harness::checkpoint::{encode_adapters, encode_posterior};
use blxs_core::harness::experiment::{fit, pretrain_key};
use blxs_core::harness::report::{read_records_csv, write_figure_csv, write_report};
use blxs_core::harness::{
    make_dataset, selftest, sweep, AggregateRow, Axis, ExperimentConfig, MetricsRecord,
    PretrainCache,
};
use blxs_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "blxs",
    version,
    about = "Bayesian low-rank adapter experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the backbone on the source task and save a checkpoint.
    Pretrain(RunArgs),
    /// Fine-tune one method over every seed and report.
    Run(RunArgs),
    /// Run one axis of values x seeds.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_axis)]
        axis: Axis,
        /// Comma-separated axis values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Aggregate an existing records.csv.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the adapter parameter-count table.
    Count {
        #[arg(long, value_enum, default_value_t = Preset::RobertaLargeCountOnly)]
        preset: Preset,
        #[arg(long)]
        json: bool,
    },
    /// Run the bundled oracle checks.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Mlp,
    Transformer,
    RobertaLargeCountOnly,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Mlp => "mlp",
            Preset::Transformer => "transformer",
            Preset::RobertaLargeCountOnly => "roberta-large-count-only",
        }
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in starting config when no --config is given.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Single run seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    cov_rank: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    subsample: Option<f64>,
    #[arg(long)]
    swag_epochs: Option<usize>,
    /// Write 0 in the wall_time_s column so records are reproducible byte for byte.
    #[arg(long)]
    no_timing: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for cached pretrained backbones.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Also save adapter and posterior checkpoints per seed (run only).
    #[arg(long)]
    save_checkpoints: bool,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_axis(s: &str) -> std::result::Result<Axis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(p)) => ExperimentConfig::preset(p.name())?,
            (None, None) => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(r) = self.rank {
            cfg.rank = r;
        }
        if let Some(k) = self.cov_rank {
            cfg.cov_rank = k;
        }
        if let Some(s) = self.samples {
            cfg.samples = s;
        }
        if let Some(f) = self.subsample {
            cfg.subsample = f;
        }
        if let Some(e) = self.swag_epochs {
            cfg.swag_epochs = e;
        }
        if self.no_timing {
            cfg.timing = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn cache(&self) -> PretrainCache {
        match &self.cache_dir {
            Some(d) => PretrainCache::with_dir(d),
            None => PretrainCache::new(),
        }
    }
}

fn print_aggregate(rows: &[AggregateRow]) {
    println!(
        "{:<10} {:>3} {:>3} {:>6} {:>10} {:>3}  {:>15} {:>15} {:>15}",
        "method", "r", "k", "frac", "params", "n", "accuracy", "ece", "nll"
    );
    for a in rows {
        let k = a.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "{:<10} {:>3} {:>3} {:>6} {:>10} {:>3}  {:>7.4}±{:<7.4} {:>7.4}±{:<7.4} {:>7.4}±{:<7.4}",
            a.method.as_str(),
            a.r,
            k,
            a.subsample,
            a.param_count,
            a.n_seeds,
            a.accuracy.median,
            a.accuracy.sd,
            a.ece.median,
            a.ece.sd,
            a.nll.median,
            a.nll.sd
        );
    }
}

fn emit(
    records: &[MetricsRecord],
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<AggregateRow>> {
    for r in records.iter().filter(|r| r.is_failed()) {
        eprintln!(
            "seed {} failed: {}",
            r.seed,
            r.failed.as_deref().unwrap_or("")
        );
    }
    match out {
        Some(dir) => {
            let rows = write_report(dir, records)?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            Ok(rows)
        }
        None => blxs_core::harness::aggregate(records),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let cfg = args.config()?;
            if cfg.count_preset().is_some() {
                return Err(Error::Config(
                    "count-only presets have no backbone to train".into(),
                ));
            }
            let data = make_dataset(&cfg.dataset)?;
            let pre = args.cache().get_or_train(&cfg, &data)?;
            let summary = serde_json::json!({
                "key": format!("{:016x}", pretrain_key(&cfg)),
                "source_train_accuracy": pre.source_accuracy,
                "epochs": pre.epochs,
                "params": pre.net.flat_params().len(),
            });
            if let Some(dir) = &args.out {
                std::fs::create_dir_all(dir)?;
                encode_backbone(&pre.net).save(&dir.join("backbone.ckpt"))?;
                std::fs::write(
                    dir.join("pretrain.json"),
                    serde_json::to_string_pretty(&summary)?,
                )?;
            }
            println!("{summary}");
        }
        Command::Run(args) => {
            let cfg = args.config()?;
            let cache = args.cache();
            let records = blxs_core::harness::run_all(std::slice::from_ref(&cfg), &cache)?;
            let rows = emit(&records, &cfg, args.out.as_deref())?;
            print_aggregate(&rows);
            if args.save_checkpoints {
                let dir = args
                    .out
                    .as_ref()
                    .ok_or_else(|| Error::Config("--save-checkpoints needs --out".into()))?;
                if cfg.count_preset().is_some() {
                    return Err(Error::Config(
                        "count-only runs have nothing to checkpoint".into(),
                    ));
                }
                let data = make_dataset(&cfg.dataset)?;
                let pre = cache.get_or_train(&cfg, &data)?;
                let ck = dir.join("checkpoints");
                std::fs::create_dir_all(&ck)?;
                encode_backbone(&pre.net).save(&ck.join("backbone.ckpt"))?;
                for &seed in &cfg.seeds {
                    let fitted = fit(&cfg, seed, &data, &pre.net)?;
                    encode_adapters(&fitted.adapters)
                        .save(&ck.join(format!("adapters-s{seed}.ckpt")))?;
                    if let Some(post) = &fitted.posterior {
                        encode_posterior(post).save(&ck.join(format!("posterior-s{seed}.ckpt")))?;
                    }
                }
            }
        }
        Command::Sweep { run, axis, values } => {
            let cfg = run.config()?;
            let values = values.unwrap_or_else(|| axis.default_values());
            let records = sweep(&cfg, axis, &values, &run.cache())?;
            let rows = emit(&records, &cfg, run.out.as_deref())?;
            if let Some(dir) = &run.out {
                let name = format!("figure_{}.csv", axis.as_str());
                write_figure_csv(axis, &rows, std::fs::File::create(dir.join(name))?)?;
            }
            print_aggregate(&rows);
        }
        Command::Report { input, out } => {
            let records = read_records_csv(std::fs::File::open(&input)?)?;
            let rows = match &out {
                Some(dir) => write_report(dir, &records)?,
                None => blxs_core::harness::aggregate(&records)?,
            };
            print_aggregate(&rows);
        }
        Command::Count { preset, json } => {
            let rows = count_table(&ShapePreset::by_name(preset.name())?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                println!(
                    "{:<10} {:>3} {:>3} {:>12} {:>8}",
                    "method", "r", "k", "params", "display"
                );
                for r in rows {
                    let k = r.k.map(|k| k.to_string()).unwrap_or_else(|| "-".into());
                    println!(
                        "{:<10} {:>3} {:>3} {:>12} {:>8}",
                        r.method.as_str(),
                        r.r,
                        k,
                        r.params,
                        r.display
                    );
                }
            }
        }
        Command::Selftest => {
            let checks = selftest::run();
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{} {:<24} {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                return Err(Error::InvalidArgument(format!(
                    "{failed} selftest check(s) failed"
                )));
            }
        }
    }
    Ok(())
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_line("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
