use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bwma::cim::{map_architecture, simulate_network, CrossbarSpec, DeviceType, NoiseConfig};
use bwma::data::{self, load_checkpoint, save_checkpoint, Dataset, DatasetKind, RunConfig, Split};
use bwma::hw_cost::{device_compare, estimate, sweep_adc_bits, sweep_to_csv, CostTables, Workload};
use bwma::nn::{Model, QuantConfig};
use bwma::plot::{cost_breakdown_svg, scatter_svg};
use bwma::sweep::{act_bit_sweep, bit_sweep_to_csv};
use bwma::train::{evaluate, init_rng, metrics_to_csv, train, TrainOptions};
use bwma::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "bwma", version, about = "Binary-weight CNN training, crossbar simulation and CIM cost reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantization-aware training; writes metrics.csv and model.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Digital quantized inference of a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Crossbar tiling and utilization of the architecture.
    Map {
        #[command(flatten)]
        common: Common,
    },
    /// Mixed-signal crossbar inference of a checkpoint.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Relative std of programmed conductances; 0 disables noise.
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
    },
    /// Latency, energy and area estimate with an ADC resolution sweep.
    Cost {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy and cost over activation bitwidths.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6")]
        bits: Vec<u32>,
        /// Train a model per bitwidth instead of re-quantizing one checkpoint.
        #[arg(long)]
        retrain: bool,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// 1..=8, or 32 for a full-precision baseline.
    #[arg(long)]
    act_bits: Option<u32>,
    /// 0 bypasses the ADC.
    #[arg(long)]
    adc_bits: Option<u32>,
    /// Crossbar size as RxC, e.g. 64x64.
    #[arg(long)]
    crossbar: Option<String>,
    #[arg(long)]
    device: Option<DeviceType>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
}

/// Process exit codes by failure class.
mod exit {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERIC: u8 = 4;
    pub const CHECKPOINT: u8 = 5;
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => exit::CONFIG,
        Error::Io { .. } | Error::Format { .. } => exit::DATA,
        Error::Numeric(_) | Error::NonFinite(_) => exit::NUMERIC,
        Error::Checkpoint(_) | Error::Checksum { .. } => exit::CHECKPOINT,
        _ => exit::OTHER,
    }
}

type Result<T> = bwma::Result<T>;

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(a) = &self.arch {
            c.arch = a.clone();
            let arch = c.architecture().map_err(|e| Error::Config(e.to_string()))?;
            c.dataset = if arch.input[0] == 3 {
                DatasetKind::Cifar10
            } else {
                DatasetKind::Mnist
            };
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(b) = self.act_bits {
            c.act_bits = b;
        }
        if let Some(b) = self.adc_bits {
            c.crossbar.adc_bits = b;
        }
        if let Some(x) = &self.crossbar {
            let (rows, cols) = CrossbarSpec::parse_size(x)?;
            c.crossbar = CrossbarSpec { rows, cols, ..c.crossbar };
        }
        if let Some(d) = self.device {
            c.crossbar.device_type = d;
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        c.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        Ok(c)
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn io_err(p: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: p.to_path_buf(),
        source: e,
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).map_err(|e| io_err(&p, e))?;
    log::info!("wrote {}", p.display());
    Ok(())
}

fn write_report(dir: &Path, name: &str, command: &str, config: &RunConfig, result: Value) -> Result<()> {
    let report = json!({ "command": command, "config": config, "result": result });
    write(dir, name, &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn load_split(c: &RunConfig, split: Split) -> Result<Dataset> {
    let root = data::data_root(c.data_dir.as_deref());
    let d = match c.dataset {
        DatasetKind::Mnist => data::load_mnist(&root, split)?,
        DatasetKind::Cifar10 => data::load_cifar10(&root, split, c.cifar_mean, c.cifar_std)?,
    };
    match (split, c.train_limit, c.test_limit) {
        (Split::Train, Some(n), _) | (Split::Test, _, Some(n)) => d.head(n),
        _ => Ok(d),
    }
}

fn tables(c: &RunConfig) -> Result<CostTables> {
    match &c.cost_tables {
        Some(p) => CostTables::load(p),
        None => Ok(CostTables::default()),
    }
}

fn fresh_model(c: &RunConfig) -> Result<Model> {
    Model::new(c.architecture()?, c.quant_config(), &mut init_rng(c.seed))
}

/// Train with `c`, streaming metrics to `<out>/<prefix>metrics.csv`.
fn run_training(c: &RunConfig, out: &Path, prefix: &str) -> Result<(Model, Vec<bwma::train::EpochMetrics>)> {
    let (tr, te) = (load_split(c, Split::Train)?, load_split(c, Split::Test)?);
    let mut model = fresh_model(c)?;
    let mut rows = Vec::new();
    let csv_name = format!("{prefix}metrics.csv");
    let outcome = train(&mut model, &tr, &te, &TrainOptions::from_config(c), |m| {
        rows.push(*m);
        if let Err(e) = write(out, &csv_name, &metrics_to_csv(&rows)) {
            log::warn!("{e}");
        }
    })?;
    write(out, &csv_name, &metrics_to_csv(&outcome.metrics))?;
    save_checkpoint(&out.join(format!("{prefix}model.ckpt")), &model, outcome.final_ste, Some(c))?;
    Ok((model, outcome.metrics))
}

/// Point the config at the checkpoint's architecture and matching dataset.
fn adopt_arch(c: &mut RunConfig, model: &Model) {
    c.arch = model.arch.name.clone();
    c.dataset = if model.arch.input[0] == 3 {
        DatasetKind::Cifar10
    } else {
        DatasetKind::Mnist
    };
}

fn checkpoint_path(out: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| out.join("model.ckpt"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let c = common.resolve()?;
            create_out(&common.out)?;
            let (_, metrics) = run_training(&c, &common.out, "")?;
            let last = metrics.last().copied();
            println!(
                "trained {} for {} epochs: test accuracy {:.4}",
                c.arch,
                metrics.len(),
                last.map_or(f64::NAN, |m| m.test_acc)
            );
            write_report(&common.out, "train.json", "train", &c, json!({ "epochs": metrics }))
        }
        Command::Eval { common, checkpoint } => {
            let mut c = common.resolve()?;
            create_out(&common.out)?;
            let (mut model, _) = load_checkpoint(&checkpoint_path(&common.out, &checkpoint))?;
            if common.act_bits.is_some() {
                let bits = c.quant_config().act_bits;
                model.set_act_bits(bits)?;
            } else {
                c.act_bits = model.quant.act_bits.unwrap_or(QuantConfig::FLOAT_SENTINEL);
            }
            adopt_arch(&mut c, &model);
            let te = load_split(&c, Split::Test)?;
            let ev = evaluate(&model, &te, c.eval_batch_size)?;
            println!("test loss {:.4}, accuracy {:.4} on {} samples", ev.loss, ev.accuracy, te.len());
            write_report(&common.out, "eval.json", "eval", &c, json!({ "samples": te.len(), "evaluation": ev }))
        }
        Command::Map { common } => {
            let c = common.resolve()?;
            create_out(&common.out)?;
            let r = map_architecture(&c.architecture()?, &c.crossbar)?;
            let mut csv = String::from("layer,fan_in,outputs,tiles,used_cells,total_cells,utilization,unused_fraction\n");
            for l in &r.layers {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    l.name,
                    l.shape.fan_in(),
                    l.shape.numel() / l.shape.fan_in(),
                    l.tiles,
                    l.used_cells,
                    l.total_cells,
                    l.utilization,
                    l.unused_fraction()
                ));
            }
            write(&common.out, "mapping.csv", &csv)?;
            println!(
                "{} on {}x{}: {} tiles, {:.1}% of cells unused",
                r.network,
                c.crossbar.rows,
                c.crossbar.cols,
                r.totals.tiles,
                100.0 * r.totals.unused_fraction
            );
            write_report(&common.out, "mapping.json", "map", &c, serde_json::to_value(&r)?)
        }
        Command::Simulate {
            common,
            checkpoint,
            noise_sigma,
        } => {
            let mut c = common.resolve()?;
            create_out(&common.out)?;
            let (model, _) = load_checkpoint(&checkpoint_path(&common.out, &checkpoint))?;
            adopt_arch(&mut c, &model);
            let te = load_split(&c, Split::Test)?;
            let noise = (noise_sigma > 0.0).then_some(NoiseConfig {
                sigma: noise_sigma,
                seed: c.seed,
            });
            let expected = common.act_bits.map(|_| c.act_bits);
            let sim = simulate_network(&model, &c.crossbar, noise, expected, &te.images, &te.labels, c.eval_batch_size)?;
            let digital = evaluate(&model, &te, c.eval_batch_size)?;
            println!(
                "crossbar accuracy {:.4}, digital accuracy {:.4} on {} samples",
                sim.accuracy,
                digital.accuracy,
                te.len()
            );
            write_report(
                &common.out,
                "simulate.json",
                "simulate",
                &c,
                json!({
                    "samples": te.len(),
                    "noise_sigma": noise_sigma,
                    "crossbar_accuracy": sim.accuracy,
                    "digital_accuracy": digital.accuracy,
                    "stats": sim.stats,
                }),
            )
        }
        Command::Cost { common } => {
            let c = common.resolve()?;
            create_out(&common.out)?;
            let arch = c.architecture()?;
            let t = tables(&c)?;
            let w = Workload {
                act_bits: c.act_bits.min(8),
                ..Workload::default()
            };
            let r = estimate(&arch, &c.crossbar, &t, &w)?;
            write(&common.out, "cost.csv", &r.to_csv())?;
            write(&common.out, "cost_breakdown.svg", &cost_breakdown_svg(&r))?;
            let adc = sweep_adc_bits(&arch, &c.crossbar, &t, &w, &[3, 4, 5, 6])?;
            write(&common.out, "adc_sweep.csv", &sweep_to_csv(&adc))?;
            let devices = device_compare(&arch, &c.crossbar, &t, &w)?;
            println!(
                "{}: latency {:.3e} s, energy {:.3e} J, area {:.3e} m^2",
                r.network, r.latency_s.total, r.energy_j.total, r.area_m2.total
            );
            let energy: serde_json::Map<String, Value> =
                devices.iter().map(|(d, e)| (d.to_string(), json!(e))).collect();
            write_report(
                &common.out,
                "cost.json",
                "cost",
                &c,
                json!({ "report": r, "adc_sweep": adc, "device_energy_j": energy }),
            )
        }
        Command::Sweep {
            common,
            checkpoint,
            bits,
            retrain,
        } => {
            let c = common.resolve()?;
            create_out(&common.out)?;
            let t = tables(&c)?;
            let arch = c.architecture()?;
            let base = if retrain {
                None
            } else {
                Some(load_checkpoint(&checkpoint_path(&common.out, &checkpoint))?.0)
            };
            let te = load_split(&c, Split::Test)?;
            let rows = act_bit_sweep(&arch, &c.crossbar, &t, &bits, |b| {
                let model = match &base {
                    Some(m) => {
                        let mut m = m.clone();
                        m.set_act_bits(Some(b))?;
                        m
                    }
                    None => {
                        let cb = RunConfig { act_bits: b, ..c.clone() };
                        run_training(&cb, &common.out, &format!("b{b}_"))?.0
                    }
                };
                let acc = evaluate(&model, &te, c.eval_batch_size)?.accuracy;
                log::info!("{b}-bit activations: accuracy {acc:.4}");
                Ok(acc)
            })?;
            write(&common.out, "sweep.csv", &bit_sweep_to_csv(&rows))?;
            let points: Vec<_> = rows
                .iter()
                .map(|r| (format!("b={}", r.act_bits), r.energy, r.accuracy))
                .collect();
            write(
                &common.out,
                "sweep.svg",
                &scatter_svg("accuracy vs energy", "normalized energy", "test accuracy", &points)?,
            )?;
            for r in &rows {
                println!("b={} accuracy {:.4} energy x{:.3}", r.act_bits, r.accuracy, r.energy);
            }
            write_report(&common.out, "sweep.json", "sweep", &c, json!({ "retrain": retrain, "rows": rows }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
