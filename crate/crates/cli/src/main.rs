use std::path::PathBuf;
use std::process::ExitCode;

use attempt_core::commands::{self, TargetOptions};
use attempt_core::config::ExperimentConfig;
use attempt_core::data::Split;
use attempt_core::train::TrainConfig;
use attempt_core::Result;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "attempt", version, about = "Attentional mixtures of soft prompts over a frozen seq2seq backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build (and optionally pretrain) the frozen backbone.
    BuildLm {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Write every configured task as JSONL plus a manifest.
    GenData {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one prompt per source task.
    TrainSource {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Train an attention module across the source tasks.
    PretrainPrior {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Train target prompts through the attention mixture.
    TrainTarget {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        multi_task: bool,
        /// no-target, const-attn, single:NAME or no-prior.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        prior: Option<PathBuf>,
        /// random or source:NAME.
        #[arg(long)]
        target_init: Option<String>,
        #[arg(long)]
        attention_lr: Option<f64>,
        #[arg(long)]
        prompt_lr: Option<f64>,
        #[arg(long)]
        task: Option<String>,
    },
    /// Score saved target artifacts and export attention tables.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long, default_value = "dev")]
        split: String,
        #[arg(long)]
        svg: bool,
    },
    /// Print trainable-parameter accounting.
    Params {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short = 'd', long)]
        model_dim: Option<usize>,
        #[arg(short, long)]
        m: Option<usize>,
        #[arg(short, long)]
        r: Option<usize>,
        #[arg(short, long, default_value_t = 1)]
        n: usize,
        /// m=100, r=100, d=768.
        #[arg(long)]
        full_scale: bool,
    },
    /// Train every ablation variant on one target task.
    AblationGrid {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        _ => Err(attempt_core::Error::Config(format!("unknown split `{s}`"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildLm { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = commands::build_lm(&cfg)?;
            println!("wrote {}", s.path.display());
            println!("parameters: {} (trainable: {})", s.param_count, s.trainable_params);
            println!("theta hash: {}", s.theta_hash);
        }
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            for p in commands::gen_data(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::TrainSource { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            for o in commands::train_source(&cfg)? {
                println!(
                    "{}: best dev {:.4} ({}) in {:.1}s -> {}",
                    o.task_id,
                    o.report.best_dev_metric,
                    o.report.best_checkpoint_id,
                    o.report.wall_clock_secs,
                    o.checkpoint.display()
                );
            }
        }
        Command::PretrainPrior { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (path, report) = commands::pretrain_prior(&cfg)?;
            println!("prior trained for {} steps -> {}", report.steps, path.display());
        }
        Command::TrainTarget {
            config,
            multi_task,
            ablation,
            prior,
            target_init,
            attention_lr,
            prompt_lr,
            task,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let opts = TargetOptions {
                multi_task,
                ablation: ablation.as_deref().map(commands::parse_ablation).transpose()?,
                prior,
                target_init: target_init.as_deref().map(commands::parse_target_init).transpose()?,
                attention_lr,
                prompt_lr,
                task,
            };
            let out = commands::train_target(&cfg, &opts)?;
            for r in &out.reports {
                println!(
                    "[{}] {}: best dev {:.4} ({}) in {:.1}s",
                    out.variant,
                    r.task_ids.join(","),
                    r.best_dev_metric,
                    r.best_checkpoint_id,
                    r.wall_clock_secs
                );
            }
            for r in &out.evals {
                println!("[{}] {}: evaluation-only dev exact match {:.4}", out.variant, r.task_id, r.exact_match);
            }
        }
        Command::Eval {
            config,
            variant,
            split,
            svg,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = commands::eval(&cfg, &variant, parse_split(&split)?, svg)?;
            for r in &out.reports {
                println!("{}: exact match {:.4} over {}", r.task_id, r.exact_match, r.n);
            }
            println!("exports in {}", out.dir.display());
        }
        Command::Params {
            config,
            model_dim,
            m,
            r,
            n,
            full_scale,
        } => {
            let (mut tc, mut d) = match &config {
                Some(p) => {
                    let cfg = ExperimentConfig::load(p)?;
                    (cfg.train.clone(), cfg.lm.model_dim)
                }
                None => (TrainConfig::default(), 64),
            };
            if full_scale {
                tc = TrainConfig::full_scale();
                d = 768;
            }
            tc.prompt_length = m.unwrap_or(tc.prompt_length);
            tc.bottleneck = r.unwrap_or(tc.bottleneck);
            d = model_dim.unwrap_or(d);
            print!("{}", commands::params(&tc, d, n)?.render());
        }
        Command::AblationGrid { config, task, seeds } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rows = commands::ablation_grid(&cfg, task.as_deref(), &seeds)?;
            print!("{}", commands::render_grid(&rows, &seeds));
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
