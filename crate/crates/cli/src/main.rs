//! `adc`: gradient checks, oracles, benchmarks and the blob experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adc_core::adc::KernelPath;
use adc_core::bench::{run_bench, BenchConfig};
use adc_core::experiment::{
    ablation_csv, cached_datasets, datasets, groups_ablation, load_run, rate_scale_analysis, save_analysis, save_run,
    train, TrainConfig,
};
use adc_core::gradcheck::{run_suite, GradCheckConfig};
use adc_core::model::{SpatialKind, ToyPoseNet};
use adc_core::oracle::{delta_kernel_check, impulse_footprint, integer_rate_check, ORACLE_TOL};
use adc_core::stats::median;
use adc_core::AdcError;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "adc", version, about = "Adaptive dilated convolution toolkit")]
struct Cli {
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file. Flags override it; it overrides presets.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<subcommand>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        /// Input shapes N,C,H,W for the layer and block checks.
        #[arg(long, value_parser = parse_shape, num_args = 1..)]
        sizes: Vec<[usize; 4]>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Integer-rate equivalence, impulse footprint and delta-kernel checks.
    Oracle {
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Times the adaptive convolution after checking the fast path.
    Bench {
        #[arg(long, value_parser = parse_shape)]
        shape: Option<[usize; 4]>,
        #[arg(long = "impl")]
        path: Option<KernelPath>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        groups: Option<usize>,
    },
    /// Trains one net on the blob task.
    Train(TrainArgs),
    /// Rate-versus-scale tables for a trained checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Final eval loss for each dilation-group count over several seeds.
    AblateGroups {
        #[arg(long)]
        seeds: Option<usize>,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    /// `default` or `smoke`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    eval_size: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    /// Train the fixed-rate baseline with this integer rate instead.
    #[arg(long)]
    baseline: Option<usize>,
    #[arg(long)]
    path: Option<KernelPath>,
    /// Directory for cached datasets.
    #[arg(long)]
    data_cache: Option<PathBuf>,
}

/// Flat config file schema shared by every subcommand.
#[derive(Serialize, Deserialize, Debug, Default, Clone)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
    preset: Option<String>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    eval_every: Option<usize>,
    train_size: Option<usize>,
    eval_size: Option<usize>,
    image_size: Option<usize>,
    width: Option<usize>,
    bottleneck: Option<usize>,
    blocks: Option<usize>,
    groups: Option<usize>,
    baseline: Option<usize>,
    path: Option<KernelPath>,
    data_cache: Option<PathBuf>,
    tol: Option<f64>,
    sizes: Option<Vec<[usize; 4]>>,
    shape: Option<[usize; 4]>,
    #[serde(rename = "impl")]
    bench_path: Option<KernelPath>,
    reps: Option<usize>,
    warmup: Option<usize>,
    rate: Option<f64>,
    seeds: Option<usize>,
}

#[derive(Serialize, Debug)]
struct RunManifest<'a> {
    subcommand: &'a str,
    config: serde_json::Value,
    seed: u64,
    threads: Option<usize>,
    version: &'a str,
    outputs: Vec<PathBuf>,
}

fn parse_shape(s: &str) -> Result<[usize; 4], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad shape '{s}': {e}")))
        .collect::<Result<_, _>>()?;
    let dims: [usize; 4] = parts.try_into().map_err(|_| format!("shape '{s}' needs four comma-separated sizes"))?;
    if dims.contains(&0) {
        return Err(format!("shape '{s}' has a zero dimension"));
    }
    Ok(dims)
}

fn preset(name: &str) -> Result<TrainConfig, AdcError> {
    match name {
        "default" => Ok(TrainConfig::default()),
        "smoke" => Ok(TrainConfig {
            epochs: 2,
            batch_size: 8,
            eval_every: 1,
            train_size: 24,
            eval_size: 12,
            image_size: 16,
            ..TrainConfig::default()
        }),
        other => Err(AdcError::Config(format!("unknown preset '{other}' (expected default or smoke)"))),
    }
}

fn train_config(args: &TrainArgs, file: &FileConfig, seed: u64) -> Result<TrainConfig, AdcError> {
    let mut c = preset(args.preset.as_deref().or(file.preset.as_deref()).unwrap_or("default"))?;
    c.seed = seed;
    macro_rules! pick {
        ($field:ident) => {
            if let Some(v) = args.$field.clone().or(file.$field.clone()) {
                c.$field = v;
            }
        };
    }
    pick!(epochs);
    pick!(batch_size);
    pick!(eval_every);
    pick!(train_size);
    pick!(eval_size);
    pick!(image_size);
    if let Some(lr) = args.lr.or(file.lr) {
        c.schedule.base_lr = lr;
    }
    if let Some(p) = args.path.or(file.path) {
        c.net.path = p;
    }
    if let Some(v) = file.width {
        c.net.width = v;
    }
    if let Some(v) = file.bottleneck {
        c.net.bottleneck = v;
    }
    if let Some(v) = file.blocks {
        c.net.blocks = v;
    }
    let groups = args.groups.or(file.groups).unwrap_or(c.net.bottleneck);
    c.net.spatial = match args.baseline.or(file.baseline) {
        Some(rate) => SpatialKind::Fixed { rate },
        None => SpatialKind::Adc { groups },
    };
    c.validate()?;
    Ok(c)
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, AdcError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| AdcError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| AdcError::Config(format!("{}: {e}", path.display())))
}

/// Outcome of a subcommand: whether every check passed, the resolved
/// config, and the files written.
struct Outcome {
    passed: bool,
    config: serde_json::Value,
    outputs: Vec<PathBuf>,
}

fn write_json(path: PathBuf, value: &impl Serialize) -> Result<PathBuf, AdcError> {
    fs::write(&path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(path)
}

fn run_command(cli: &Cli, file: &FileConfig, seed: u64, out: &Path) -> Result<Outcome, AdcError> {
    fs::create_dir_all(out)?;
    match &cli.command {
        Command::Gradcheck { sizes, tol } => {
            let mut cfg = GradCheckConfig {
                seed,
                ..GradCheckConfig::default()
            };
            if let Some(t) = tol.or(file.tol) {
                cfg.tol = t;
            }
            if !sizes.is_empty() {
                cfg.sizes = sizes.clone();
            } else if let Some(s) = &file.sizes {
                cfg.sizes = s.clone();
            }
            let reports = run_suite(&cfg)?;
            for r in &reports {
                println!("{}", r.line());
                for m in &r.failures {
                    println!(
                        "  {}: analytic {:e} numeric {:e} rel err {:.2e}",
                        m.coordinate, m.analytic, m.numeric, m.rel_err
                    );
                }
            }
            let passed = reports.iter().all(|r| r.passed());
            Ok(Outcome {
                passed,
                config: serde_json::json!({ "tol": cfg.tol, "step": cfg.step, "seed": seed, "sizes": cfg.sizes }),
                outputs: vec![write_json(out.join("gradcheck.json"), &reports)?],
            })
        }
        Command::Oracle { rate } => {
            let rate = rate.or(file.rate);
            let mut passed = true;
            let mut checks = Vec::new();
            let integer_rates: Vec<usize> = match rate {
                Some(r) if r.fract() == 0.0 && r >= 1.0 => vec![r as usize],
                Some(_) => vec![],
                None => vec![1, 2, 3],
            };
            for r in integer_rates {
                for path in [KernelPath::Naive, KernelPath::Blocked] {
                    let c = integer_rate_check(r, path, seed)?;
                    println!(
                        "rate {r} {path:?}: max abs diff vs reference {:.1e} {}",
                        c.max_abs_diff,
                        if c.passed() { "PASS" } else { "FAIL" }
                    );
                    passed &= c.passed();
                    checks.push(c);
                }
            }
            let footprint = impulse_footprint(rate.unwrap_or(2.5))?;
            println!(
                "rate {} impulse: support {:?}, bounding side {}, mass {}, formula area {}",
                footprint.rate, footprint.support, footprint.bounding_side, footprint.mass, footprint.formula_area
            );
            let delta = delta_kernel_check(seed)?;
            let delta_ok = delta < ORACLE_TOL;
            println!("delta kernel: max abs diff {delta:.1e} {}", if delta_ok { "PASS" } else { "FAIL" });
            passed &= delta_ok;
            let report = serde_json::json!({ "rate_checks": checks, "footprint": footprint, "delta_max_abs_diff": delta });
            Ok(Outcome {
                passed,
                config: serde_json::json!({ "rate": rate, "seed": seed }),
                outputs: vec![write_json(out.join("oracle.json"), &report)?],
            })
        }
        Command::Bench {
            shape,
            path,
            reps,
            groups,
        } => {
            let mut cfg = BenchConfig {
                seed,
                ..BenchConfig::default()
            };
            if let Some(s) = shape.or(file.shape) {
                cfg.shape = s;
            }
            if let Some(p) = path.or(file.bench_path) {
                cfg.path = p;
            }
            if let Some(r) = reps.or(file.reps) {
                cfg.reps = r;
            }
            if let Some(w) = file.warmup {
                cfg.warmup = w;
            }
            cfg.groups = groups.or(file.groups).unwrap_or(cfg.groups.min(cfg.shape[1]));
            let report = run_bench(&cfg)?;
            println!("fast path max abs diff vs naive {:.1e} (tol 1e-10)", report.fast_path_diff);
            println!(
                "{:?} {:?}: forward median {:.3} ms p95 {:.3} ms, backward median {:.3} ms p95 {:.3} ms over {} reps",
                report.path,
                report.shape,
                report.forward.median_ms,
                report.forward.p95_ms,
                report.backward.median_ms,
                report.backward.p95_ms,
                report.reps
            );
            Ok(Outcome {
                passed: true,
                config: serde_json::json!({
                    "shape": cfg.shape, "impl": cfg.path, "reps": cfg.reps, "warmup": cfg.warmup,
                    "groups": cfg.groups, "seed": seed,
                }),
                outputs: vec![write_json(out.join("bench.json"), &report)?],
            })
        }
        Command::Train(args) => {
            let config = train_config(args, file, seed)?;
            let cache = args.data_cache.clone().or(file.data_cache.clone());
            let (train_set, eval_set) = match &cache {
                Some(dir) => cached_datasets(&config, dir)?,
                None => datasets(&config)?,
            };
            let model = ToyPoseNet::new(config.net.clone(), config.seed)?;
            let outcome = train(model, &config, &train_set, &eval_set)?;
            for p in &outcome.curve {
                println!("epoch {:>3} {:<5} loss {:.6e}", p.epoch, p.split, p.loss);
            }
            println!("final eval loss {:.6e}", outcome.final_eval_loss);
            let outputs = save_run(out, &config, &outcome, &eval_set)?;
            Ok(Outcome {
                passed: true,
                config: serde_json::to_value(&config)?,
                outputs,
            })
        }
        Command::Analyze { checkpoint } => {
            let (model, config) = load_run(checkpoint)?;
            let eval_set = match &file.data_cache {
                Some(dir) => cached_datasets(&config, dir)?.1,
                None => datasets(&config)?.1,
            };
            let analysis = rate_scale_analysis(&model, &eval_set)?;
            if analysis.rows.is_empty() {
                println!("checkpoint has no adaptive blocks; nothing to analyze");
            }
            for r in &analysis.rows {
                println!(
                    "block {} {:<6} mean {:.4} var {:.4e} spearman {:+.3}{}",
                    r.block,
                    r.bucket,
                    r.mean,
                    r.var,
                    r.spearman,
                    if r.degenerate { " (degenerate)" } else { "" }
                );
            }
            Ok(Outcome {
                passed: true,
                config: serde_json::json!({ "checkpoint": checkpoint, "train": config }),
                outputs: save_analysis(out, &analysis)?,
            })
        }
        Command::AblateGroups { seeds, train } => {
            let config = train_config(train, file, seed)?;
            let n = seeds.or(file.seeds).unwrap_or(3);
            if n == 0 {
                return Err(AdcError::Config("--seeds must be at least 1".into()));
            }
            let seed_list: Vec<u64> = (0..n as u64).map(|k| seed + k).collect();
            let rows = groups_ablation(&config, &seed_list)?;
            let mut gs: Vec<usize> = rows.iter().map(|r| r.g).collect();
            gs.sort_unstable();
            gs.dedup();
            for g in gs {
                let losses: Vec<f64> = rows.iter().filter(|r| r.g == g).map(|r| r.final_loss).collect();
                println!("g={g}: median final eval loss {:.6e} over {} seeds", median(&losses), losses.len());
            }
            let csv = out.join("ablation.csv");
            fs::write(&csv, ablation_csv(&rows))?;
            Ok(Outcome {
                passed: true,
                config: serde_json::json!({ "train": config, "seeds": seed_list }),
                outputs: vec![csv],
            })
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Gradcheck { .. } => "gradcheck",
        Command::Oracle { .. } => "oracle",
        Command::Bench { .. } => "bench",
        Command::Train(_) => "train",
        Command::Analyze { .. } => "analyze",
        Command::AblateGroups { .. } => "ablate-groups",
    }
}

fn is_usage_error(e: &AdcError) -> bool {
    matches!(
        e,
        AdcError::Config(_) | AdcError::BadGroups { .. } | AdcError::EvenKernel(_) | AdcError::BadRate(_)
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file = match load_file_config(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let threads = cli.threads.or(file.threads);
    let name = subcommand_name(&cli.command);
    let out = cli
        .out
        .clone()
        .or(file.out.clone())
        .unwrap_or_else(|| Path::new("runs").join(name));
    let pool = match threads {
        Some(0) => {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        Some(t) => rayon::ThreadPoolBuilder::new().num_threads(t).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    };
    let pool = match pool {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    };
    let result = pool.install(|| run_command(&cli, &file, seed, &out)).and_then(|o| {
        let manifest = RunManifest {
            subcommand: name,
            config: o.config,
            seed,
            threads,
            version: concat!("adc ", env!("CARGO_PKG_VERSION")),
            outputs: o.outputs,
        };
        write_json(out.join("manifest.json"), &manifest)?;
        Ok(o.passed)
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_usage_error(&e) { 2 } else { 1 })
        }
    }
}
