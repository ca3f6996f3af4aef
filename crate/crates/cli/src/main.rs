use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fedpt::config::{threads_from_env, ExperimentConfig, ENV_OUTPUT_DIR, ENV_THREADS};
use fedpt::experiment::{analyze_checkpoints, run_experiment, verify_manifest};
use fedpt::fedsim::{AggregationRule, Algorithm};
use fedpt::ifs::{generate_archive, CodePool, CodesPerImage, FpsParams, SamplingConfig};
use fedpt::nn::{read_checkpoint, write_checkpoint, ModelSpec, SgdConfig};
use fedpt::ssl::{pretrain, PretrainConfig, PretrainSchedule, SslObjective};

#[derive(Parser)]
#[command(
    name = "fedpt",
    version,
    about = "Federated learning simulator with fractal pre-training"
)]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = ENV_THREADS)]
    threads: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a pool of IFS codes and save it as JSON.
    GenCodes {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render fractal pairs from a code pool into an archive.
    GenPairs {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long, default_value_t = 1000)]
        pairs: u64,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        /// Codes per image; a range `min-max` draws uniformly.
        #[arg(long, default_value = "2")]
        codes_per_image: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generation threads (defaults to the global pool size).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pre-training of an encoder on a pair archive.
    Pretrain {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, value_enum, default_value_t = Objective::Simsiam)]
        objective: Objective,
        #[arg(long, default_value_t = 0.2)]
        temperature: f64,
        #[arg(long, value_enum, default_value_t = Schedule::Step)]
        schedule: Schedule,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Federated training only (analyses disabled).
    Federate(RunArgs),
    /// Post-hoc analyses on a set of client checkpoints.
    Analyze {
        #[command(flatten)]
        run: RunArgs,
        /// Client checkpoints.
        #[arg(long, num_args = 2.., required = true)]
        models: Vec<PathBuf>,
        /// Client data sizes, in the same order (default: equal).
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Full pipeline: data, pre-training, federation, analyses.
    Run(RunArgs),
    /// Re-hash the files listed in a run's manifest.
    VerifyManifest { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Simsiam,
    Infonce,
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Constant,
    Step,
    Cosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Fedavg,
    Fedprox,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    DataSize,
    OptimalConvex,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = ENV_OUTPUT_DIR)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    analysis_seed: Option<u64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    participation: Option<f64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmArg>,
    /// FedProx proximal weight.
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long, value_enum)]
    aggregation: Option<AggregationArg>,
    #[arg(long)]
    decomposition: bool,
    #[arg(long)]
    lambda_star: bool,
    #[arg(long)]
    surface: bool,
    #[arg(long)]
    segment: bool,
    #[arg(long)]
    surface_samples: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::parse(&text)?
            }
            None => ExperimentConfig::default(),
        };
        cfg.apply_env();
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set! {
            seed => cfg.seed,
            analysis_seed => cfg.analysis_seed,
            clients => cfg.federation.clients,
            alpha => cfg.federation.alpha,
            participation => cfg.federation.participation,
            rounds => cfg.federation.rounds,
            local_epochs => cfg.federation.local_epochs,
            batch_size => cfg.federation.batch_size,
            lr => cfg.federation.lr,
            surface_samples => cfg.analysis.surface_samples,
        }
        match (self.algorithm, self.mu) {
            (Some(AlgorithmArg::Fedavg), _) => cfg.federation.algorithm = Algorithm::FedAvg,
            (Some(AlgorithmArg::Fedprox), mu) => {
                cfg.federation.algorithm = Algorithm::FedProx { mu: mu.unwrap_or(0.01) }
            }
            (None, Some(mu)) => cfg.federation.algorithm = Algorithm::FedProx { mu },
            (None, None) => {}
        }
        if let Some(a) = self.aggregation {
            cfg.federation.aggregation = match a {
                AggregationArg::DataSize => AggregationRule::DataSize,
                AggregationArg::OptimalConvex => AggregationRule::OptimalConvex,
            };
        }
        let a = &mut cfg.analysis;
        a.decomposition |= self.decomposition;
        a.lambda_star |= self.lambda_star;
        a.surface |= self.surface;
        a.segment |= self.segment;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_codes_per_image(s: &str) -> Result<CodesPerImage> {
    Ok(match s.split_once('-') {
        Some((lo, hi)) => CodesPerImage::Uniform {
            min: lo.trim().parse()?,
            max: hi.trim().parse()?,
        },
        None => CodesPerImage::Fixed {
            count: s.trim().parse()?,
        },
    })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let threads = match cli.threads {
        Some(0) => bail!("--threads must be positive"),
        Some(n) => Some(n),
        None => threads_from_env()?,
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }

    match cli.command {
        Command::GenCodes { count, seed, out } => {
            let pool = CodePool::generate(seed, count, &SamplingConfig::default())?;
            pool.save_json(&out)?;
            println!("wrote {} codes to {}", pool.len(), out.display());
        }
        Command::GenPairs {
            codes,
            pairs,
            side,
            iters,
            codes_per_image,
            seed,
            workers,
            out,
        } => {
            let pool = CodePool::load_json(&codes)?;
            let params = FpsParams {
                n_iters: iters,
                codes: parse_codes_per_image(&codes_per_image)?,
                ..FpsParams::square(side)
            };
            let workers = workers.unwrap_or_else(rayon::current_num_threads);
            let summary = generate_archive(&pool, pairs, &params, seed, workers, &out)?;
            println!(
                "wrote {} pairs ({} bytes) to {}",
                summary.pairs,
                summary.bytes,
                out.display()
            );
        }
        Command::Pretrain {
            archive,
            classes,
            epochs,
            batch_size,
            lr,
            objective,
            temperature,
            schedule,
            seed,
            out,
        } => {
            let header = fedpt::ifs::ArchiveReader::open(&archive)?.header();
            let encoder = ModelSpec::small_cnn(3, header.width as usize, classes)?.encoder()?;
            let config = PretrainConfig {
                epochs,
                batch_size,
                sgd: SgdConfig::with_lr(lr),
                schedule: match schedule {
                    Schedule::Constant => PretrainSchedule::Constant,
                    Schedule::Step => PretrainSchedule::Step {
                        factor: 0.1,
                        period: 30,
                    },
                    Schedule::Cosine => PretrainSchedule::Cosine,
                },
                objective: match objective {
                    Objective::Simsiam => SslObjective::SimSiam,
                    Objective::Infonce => SslObjective::InfoNce { temperature },
                },
                seed,
                ..PretrainConfig::default()
            };
            let outcome = pretrain(&archive, &encoder, &config)?;
            write_checkpoint(&out, &outcome.encoder)?;
            println!(
                "loss {:.6} -> {:.6}; encoder written to {}",
                outcome.initial_loss,
                outcome.final_loss,
                out.display()
            );
        }
        Command::Federate(args) => {
            let mut cfg = args.config()?;
            cfg.analysis.lambda_star = false;
            cfg.analysis.surface = false;
            cfg.analysis.segment = false;
            report(run_experiment(&cfg)?);
        }
        Command::Run(args) => report(run_experiment(&args.config()?)?),
        Command::Analyze { run, models, sizes } => {
            let mut cfg = run.config()?;
            let a = &mut cfg.analysis;
            if !(a.lambda_star || a.surface || a.segment) {
                a.lambda_star = true;
                a.surface = true;
                a.segment = true;
            }
            if !sizes.is_empty() && sizes.len() != models.len() {
                bail!("{} sizes given for {} models", sizes.len(), models.len());
            }
            let sizes = if sizes.is_empty() { vec![1; models.len()] } else { sizes };
            let weights = models
                .iter()
                .map(|p| read_checkpoint(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let files = analyze_checkpoints(&cfg, &weights, &sizes, &cfg.output_dir)?;
            for f in files {
                println!("{}", cfg.output_dir.join(f).display());
            }
        }
        Command::VerifyManifest { dir } => {
            let v = verify_manifest(&dir)?;
            for p in &v.problems {
                eprintln!("{p}");
            }
            if !v.ok() {
                bail!("manifest verification failed ({} problems)", v.problems.len());
            }
            println!("{} files verified", v.checked);
        }
    }
    Ok(())
}

fn report(r: fedpt::experiment::RunReport) {
    if let Some(f) = &r.federation {
        println!(
            "final test accuracy {:.4} after {} rounds",
            f.final_eval.accuracy,
            f.metrics.len()
        );
    }
    if let Some(p) = &r.pretrain {
        println!("pre-training loss {:.6} -> {:.6}", p.initial_loss, p.final_loss);
    }
    println!("outputs in {}", r.dir.display());
}
