use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use capsroute::autodiff::gradcheck::GradCheckOptions;
use capsroute::data::{ecap, generate_phase, split, Phase};
use capsroute::metrics::{MetricsReport, CSV_HEADER};
use capsroute::model::{build_model, gradcheck_network};
use capsroute::params::ParamStore;
use capsroute::routing_bench::{bench_routing, bench_table, VoteShape};
use capsroute::train::{
    evaluate, fitted_loss, prepare_data, run_on_splits, sweep_lambda, sweep_table, ExperimentRecord, Splits, Timings,
};
use capsroute::{config, ExperimentConfig};

type CliResult<T = ()> = std::result::Result<T, Box<dyn StdError>>;

#[derive(Parser)]
#[command(name = "capsroute", version, about = "Capsule-network routing experiments on synthetic echo-like images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key = value configuration file
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Starting preset: paper or small
    #[arg(long)]
    preset: Option<String>,
    /// Override one key, e.g. `--set train.lr=0.001` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for `--set train.seed=N`
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(("preset".to_string(), p.clone()));
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| format!("--set expects KEY=VALUE, got `{s}`"))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(seed) = self.seed {
            overrides.push(("train.seed".to_string(), seed.to_string()));
        }
        let text = match &self.config {
            Some(path) => fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?,
            None => String::new(),
        };
        Ok(config::from_text(&text, &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print every configuration key with its description and value
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate a synthetic dataset and write it as an ECAP file
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Rotation range to draw from: train or test
        #[arg(long, default_value = "train")]
        phase: String,
    },
    /// Train a model and write a run directory
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory (created if missing)
        #[arg(long)]
        out: PathBuf,
        /// Train on an ECAP file instead of generating data
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a trained run on a split or an ECAP file
    Eval {
        /// Run directory written by `train`
        #[arg(long)]
        run: PathBuf,
        /// ECAP file to evaluate on; defaults to the run's own split
        #[arg(long)]
        data: Option<PathBuf>,
        /// train, validation or test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference check of the full training loss
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Coordinates sampled across all parameters
        #[arg(long, default_value_t = 300)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Time dynamic and attention routing on identical votes
    BenchRouting {
        #[arg(long, value_delimiter = ',', default_value = "128,512,1152")]
        n_in: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        n_out: usize,
        #[arg(long, default_value_t = 16)]
        d_out: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        r: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the table here as well as to stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per lambda_reg value on identical data and seed
    SweepLambda {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.0001,0.001,0.01,0.05,0.1,0.5")]
        grid: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn metrics_csv(record: &ExperimentRecord) -> String {
    let mut out = format!("split,{CSV_HEADER}\n");
    let m = &record.metrics;
    let splits = [("train", Some(&m.train)), ("validation", Some(&m.validation)), ("test", m.test.as_ref())];
    for (name, report) in splits {
        if let Some(r) = report {
            for line in r.csv_rows(record.seed).lines() {
                out.push_str(&format!("{name},{line}\n"));
            }
        }
    }
    out
}

fn write_run(dir: &Path, record: &ExperimentRecord, params: &ParamStore, timings: &Timings) -> CliResult {
    fs::create_dir_all(dir)?;
    record.save(dir.join("record.json"))?;
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(timings)?)?;
    fs::write(dir.join("config.txt"), config::render(&record.config))?;
    fs::write(dir.join("metrics.csv"), metrics_csv(record))?;
    let shown = record.metrics.test.as_ref().unwrap_or(&record.metrics.validation);
    fs::write(dir.join("confusion.csv"), shown.confusion.to_table())?;
    fs::write(dir.join("params.json"), serde_json::to_string(params)?)?;
    Ok(())
}

fn splits_from_file(cfg: &ExperimentConfig, path: &Path) -> CliResult<Splits> {
    let ds = ecap::load(path)?;
    let (train, validation, test) = split(&ds, cfg.split, cfg.synth.seed)?;
    Ok(Splits {
        train,
        validation,
        test,
    })
}

fn print_report(report: &MetricsReport) {
    print!("{}", report.to_key_value());
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Config { cfg } => print!("{}", config::render(&cfg.resolve()?)),
        Command::GenData { cfg, out, phase } => {
            let cfg = cfg.resolve()?;
            let phase: Phase = phase.parse()?;
            let ds = generate_phase(&cfg.synth, phase)?;
            ecap::save(&ds, &out)?;
            println!(
                "wrote {} samples ({} positive, {}x{}x{}) to {}",
                ds.len(),
                ds.positives(),
                ds.channels,
                ds.height,
                ds.width,
                out.display()
            );
        }
        Command::Train { cfg, out, data } => {
            let cfg = cfg.resolve()?;
            let splits = match &data {
                Some(path) => splits_from_file(&cfg, path)?,
                None => prepare_data(&cfg)?,
            };
            let (record, net, timings) = run_on_splits(&cfg, &splits)?;
            write_run(&out, &record, &net.params, &timings)?;
            let t = &record.training;
            println!(
                "trained {} epochs (best {}, validation loss {:.6}); {} parameters",
                t.epochs.len(),
                t.best_epoch,
                t.best_validation_loss,
                record.n_params
            );
            print_report(record.metrics.test.as_ref().unwrap_or(&record.metrics.validation));
            println!("run written to {}", out.display());
        }
        Command::Eval { run, data, split: which } => {
            let record = ExperimentRecord::load(run.join("record.json"))?;
            let params: ParamStore = serde_json::from_str(&fs::read_to_string(run.join("params.json"))?)?;
            let cfg = &record.config;
            let ds = match &data {
                Some(path) => ecap::load(path)?,
                None => {
                    let s = prepare_data(cfg)?;
                    match which.as_str() {
                        "train" => s.train,
                        "validation" => s.validation,
                        "test" => s.test,
                        other => return Err(format!("unknown split `{other}`").into()),
                    }
                }
            };
            let mut net = build_model(&cfg.model, ds.image_shape(), cfg.train.seed)?;
            net.set_params(params)?;
            print_report(&evaluate(&net, &ds)?);
        }
        Command::Gradcheck { cfg, batch, coords, tol } => {
            let mut cfg = cfg.resolve()?;
            cfg.synth.n_samples = batch.max(10);
            let ds = generate_phase(&cfg.synth, Phase::Train)?;
            let idx: Vec<usize> = (0..batch.min(ds.len())).collect();
            let net = build_model(&cfg.model, ds.image_shape(), cfg.train.seed)?;
            let weights = fitted_loss(&cfg.model.loss, &ds.labels_usize(), cfg.model.n_classes);
            let opts = GradCheckOptions {
                max_coords: Some(coords),
                seed: cfg.train.seed,
                ..GradCheckOptions::default()
            };
            let report = gradcheck_network(&net, &ds.batch(&idx)?, &weights, &opts)?;
            println!("checked={}", report.checked);
            println!("max_rel_err={:e}", report.max_rel_err);
            if let Some(w) = &report.worst {
                println!(
                    "worst=param {} index {} analytic {:e} numeric {:e}",
                    net.params.name(net.params.ids().nth(w.input).expect("input index")),
                    w.index,
                    w.analytic,
                    w.numeric
                );
            }
            if !report.passes(tol) {
                return Err(format!("max relative error {:e} exceeds {tol:e}", report.max_rel_err).into());
            }
            println!("pass (tol {tol:e})");
        }
        Command::BenchRouting {
            n_in,
            n_out,
            d_out,
            batch,
            r,
            repeats,
            seed,
            out,
        } => {
            let shapes: Vec<VoteShape> = n_in
                .iter()
                .map(|&n_in| VoteShape { batch, n_in, n_out, d_out })
                .collect();
            let table = bench_table(&bench_routing(&shapes, &r, repeats, seed)?);
            print!("{table}");
            if let Some(path) = out {
                fs::write(path, &table)?;
            }
        }
        Command::SweepLambda { cfg, grid, out } => {
            let cfg = cfg.resolve()?;
            let records = sweep_lambda(&cfg, &grid)?;
            fs::create_dir_all(&out)?;
            for (i, r) in records.iter().enumerate() {
                r.save(out.join(format!("record_{i:02}.json")))?;
            }
            let table = sweep_table(&records);
            fs::write(out.join("sweep.csv"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
