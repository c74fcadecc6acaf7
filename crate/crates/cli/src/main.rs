use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pqmt::bundle;
use pqmt::harness::config::ExperimentConfig;
use pqmt::harness::pipeline::{self, derive_seed, Method};
use pqmt::harness::report::{pipeline_checks, ExperimentReport};
use pqmt::runtime::{Arena, Flash};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(
    name = "pqmt",
    version,
    about = "Shared-codebook compression and swapping for small networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, default_value = "configs/desk.toml")]
    config: PathBuf,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Codewords per sub-codebook.
    #[arg(long)]
    k: Option<usize>,
    /// Allowed absolute accuracy loss.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    arena_bytes: Option<usize>,
    /// Restrict output to one method.
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Hold this task out of codebook learning (replaces the config's choice).
    #[arg(long)]
    holdout: Option<String>,
    /// Run directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method {s:?}; expected one of {}", names.join(", "))
    })
}

#[derive(Subcommand)]
enum Command {
    /// Train the original models and save them.
    Train(Common),
    /// Train and compress every task with every method (one trial).
    Compress(Common),
    /// Write the deployment bundle for one method (default yono).
    Bundle(Common),
    /// Evaluate a bundle's models through the int8 runtime.
    Run {
        #[command(flatten)]
        common: Common,
        /// Bundle file (default: <out>/bundle.ynb).
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Random swap/infer sequences against a bundle.
    SwapBench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        sequences: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
    /// Full multi-trial experiment: report tables, JSON and checks.
    Report(Common),
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
        if let Some(a) = self.arena_bytes {
            cfg.arena_bytes = a;
        }
        if let Some(h) = &self.holdout {
            if cfg.task(h).is_none() {
                return Err(format!("--holdout: no task named {h:?}").into());
            }
            for t in &mut cfg.tasks {
                t.held_out = &t.name == h;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)?;
        Ok(&self.out)
    }

    fn shows(&self, m: Method) -> bool {
        self.method.is_none_or(|x| x == m)
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| format!("writing {}: {e}", path.display()).into())
}

fn first_trial_seed(cfg: &ExperimentConfig) -> u64 {
    pipeline::trial_seeds(cfg)[0]
}

fn train(c: &Common) -> Result<bool> {
    let cfg = c.config()?;
    let dir = c.out_dir()?.join("models");
    fs::create_dir_all(&dir)?;
    let seed = first_trial_seed(&cfg);
    // Same ordering and seeds as a pipeline trial.
    let tasks: Vec<_> = cfg.suite().chain(cfg.held_out()).collect();
    for (i, t) in tasks.iter().enumerate() {
        let s = derive_seed(seed, 100 + i as u64);
        let data = pipeline::load_task(&cfg, t, s)?;
        let model = pipeline::train_original(&cfg, t, &data, s)?;
        let acc = pqmt::nn::evaluate(&model, &data.splits.test)?;
        println!(
            "{:<14} params {:>6}  test accuracy {:.2}%",
            t.name,
            model.param_count(),
            100.0 * acc
        );
        write(
            &dir.join(format!("{}.json", t.name)),
            serde_json::to_vec(&model)?,
        )?;
    }
    Ok(true)
}

fn compress(c: &Common) -> Result<bool> {
    let cfg = c.config()?;
    let art = pipeline::run_trial(&cfg, 0, first_trial_seed(&cfg))?;
    let dir = c.out_dir()?;
    write(
        &dir.join("trial.json"),
        serde_json::to_string_pretty(&art.outcome)?,
    )?;
    for t in &art.outcome.tasks {
        for o in t.outcomes.iter().filter(|o| c.shows(o.method)) {
            println!(
                "{:<14} {:<8} test {:6.2}%  holdout {:6.2}%  escapes {:?}",
                t.task,
                o.method.name(),
                100.0 * o.accuracy.test,
                100.0 * o.accuracy.holdout,
                o.escapes
            );
            if let Some(tr) = &o.trace {
                write(
                    &dir.join(format!("trace-{}-{}.jsonl", t.task, o.method.name())),
                    tr.to_json_lines(),
                )?;
            }
        }
    }
    Ok(true)
}

fn make_bundle(c: &Common) -> Result<bool> {
    let cfg = c.config()?;
    let method = c.method.unwrap_or(Method::Yono);
    let art = pipeline::run_trial(&cfg, 0, first_trial_seed(&cfg))?;
    let b = art.bundles.get(&method).ok_or_else(|| {
        format!("{method} has no single shared bundle (choose int8, pq-m, pq-mopt or yono)")
    })?;
    let bytes = bundle::serialize(b)?;
    let (_, acc) = bundle::deserialize_with_accounting(&bytes)?;
    let dir = c.out_dir()?;
    write(&dir.join("bundle.ynb"), &bytes)?;
    write(
        &dir.join("accounting.json"),
        serde_json::to_string_pretty(&acc)?,
    )?;
    println!(
        "{method} bundle: {} bytes, {} models -> {}",
        bytes.len(),
        b.models.len(),
        dir.join("bundle.ynb").display()
    );
    for (name, a) in &acc.models {
        println!(
            "  {name:<14} {:>7} bytes (codes {}, escapes {})",
            a.total(),
            a.codes,
            a.escapes
        );
    }
    let fits = bytes.len() <= cfg.flash_bytes;
    if !fits {
        eprintln!("bundle exceeds the {} byte flash budget", cfg.flash_bytes);
    }
    Ok(fits)
}

fn load_flash(c: &Common, path: &Option<PathBuf>) -> Result<Flash> {
    let p = path.clone().unwrap_or_else(|| c.out.join("bundle.ynb"));
    let bytes = fs::read(&p).map_err(|e| format!("reading {}: {e}", p.display()))?;
    Ok(Flash::new(bytes).map_err(|e| format!("{}: {e}", p.display()))?)
}

fn run(c: &Common, path: &Option<PathBuf>) -> Result<bool> {
    let cfg = c.config()?;
    let flash = load_flash(c, path)?;
    let seed = first_trial_seed(&cfg);
    let tasks: Vec<_> = cfg.suite().chain(cfg.held_out()).collect();
    let mut arena = Arena::new(cfg.arena_bytes);
    for name in flash.model_names() {
        let Some(i) = tasks.iter().position(|t| t.name == name) else {
            println!("{name:<14} not in config; skipped");
            continue;
        };
        let data = pipeline::load_task(&cfg, tasks[i], derive_seed(seed, 100 + i as u64))?;
        let stats = arena.load(&flash, &name)?;
        let pred = arena.predict(&data.splits.test.inputs)?;
        let hits = pred
            .iter()
            .zip(&data.splits.test.labels)
            .filter(|(p, l)| p == l)
            .count();
        println!(
            "{name:<14} int8 test accuracy {:6.2}%  read {} bytes  arena {} / {}",
            100.0 * hits as f64 / pred.len().max(1) as f64,
            stats.bytes_read,
            arena.used(),
            arena.capacity()
        );
    }
    Ok(arena.high_water() <= arena.capacity())
}

fn swap_bench(c: &Common, path: &Option<PathBuf>, sequences: usize, steps: usize) -> Result<bool> {
    let cfg = c.config()?;
    let flash = load_flash(c, path)?;
    let names = flash.model_names();
    if names.is_empty() {
        return Err("bundle holds no models".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut high_water, mut read, mut loads) = (0, 0usize, 0usize);
    for _ in 0..sequences {
        let mut arena = Arena::new(cfg.arena_bytes);
        for _ in 0..steps {
            let name = &names[rng.random_range(0..names.len())];
            read += arena.swap(&flash, name)?.bytes_read;
            loads += 1;
            let len: usize = arena
                .resident()
                .map_or(0, |r| r.input_shape.iter().product());
            let x: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            arena.infer(&x)?;
        }
        high_water = high_water.max(arena.high_water());
    }
    println!(
        "{sequences} sequences x {steps} steps over {} models: high water {high_water} / {} bytes, mean read {:.0} bytes per swap",
        names.len(),
        cfg.arena_bytes,
        read as f64 / loads.max(1) as f64
    );
    Ok(high_water <= cfg.arena_bytes)
}

fn report(c: &Common) -> Result<bool> {
    let cfg = c.config()?;
    let trials = pipeline::run_trials(&cfg)?;
    let dir = c.out_dir()?;
    if let Some(yono) = trials.first().and_then(|t| t.full_bundle.as_ref()) {
        write(&dir.join("bundle.ynb"), yono)?;
    }
    let report = ExperimentReport::build(&cfg, trials.into_iter().map(|t| t.outcome).collect());
    let checks = pipeline_checks(&report);
    write(&dir.join("report.json"), report.to_json())?;
    let mut text = report.render();
    text.push_str("\nchecks\n");
    for ch in &checks {
        text.push_str(&format!("{ch}\n"));
    }
    write(&dir.join("report.txt"), &text)?;
    write(
        &dir.join("checks.json"),
        serde_json::to_string_pretty(&checks)?,
    )?;
    print!("{text}");
    Ok(checks.iter().all(|c| c.pass))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Compress(c) => compress(c),
        Command::Bundle(c) => make_bundle(c),
        Command::Run { common, bundle } => run(common, bundle),
        Command::SwapBench {
            common,
            bundle,
            sequences,
            steps,
        } => swap_bench(common, bundle, *sequences, *steps),
        Command::Report(c) => report(c),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("acceptance check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
