use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use motok::commands::{self, EvalArgs, GenerateArgs, GEN_CKPT, VQVAE_CKPT};
use motok::config::{split_overrides, RunConfig};
use motok::dataset::Split;
use motok::error::{EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
use motok::MotokError;

/// Motion tokenizer and text-conditioned generator.
///
/// Any config key can be overridden as `--dotted.key value`, for example
/// `--tcc.weight 0`.
#[derive(Debug, Parser)]
#[command(name = "motok", version)]
struct Cli {
    /// TOML config file with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output`).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset and its manifest to `data.dir`.
    SynthData,
    /// Train the tokenizer.
    TrainVqvae {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the masked transformers on tokens of a trained tokenizer.
    TrainGen {
        /// Defaults to `<output>/vqvae.ckpt`.
        #[arg(long)]
        vqvae: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate motions for a file of prompts, one per line.
    Generate {
        #[arg(long)]
        vqvae: Option<PathBuf>,
        #[arg(long)]
        gen: Option<PathBuf>,
        #[arg(long)]
        prompts: PathBuf,
        /// Frames per motion.
        #[arg(long)]
        length: Option<usize>,
        /// Unmasking iterations.
        #[arg(long)]
        iters: Option<usize>,
        /// Stitch all prompts into one motion.
        #[arg(long)]
        long: bool,
        /// Transition tokens between stitched segments.
        #[arg(long)]
        transition: Option<usize>,
        /// Defaults to `<output>/generated`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score reconstructions, samples or a directory of motions.
    Eval {
        #[arg(long)]
        vqvae: Option<PathBuf>,
        #[arg(long)]
        gen: Option<PathBuf>,
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Check analytic gradients of the registered losses.
    Gradcheck {
        /// `all`, a module name or a loss name.
        #[arg(long, default_value = "all")]
        module: String,
        /// Same as `--module`.
        #[arg(conflicts_with = "module")]
        target: Option<String>,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Dump a `.motk` file as JSON lines.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli, mut overrides: Vec<(String, String)>) -> Result<i32, MotokError> {
    let threads = commands::thread_cap()?;
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &cli.output {
        overrides.push(("output".into(), o.display().to_string()));
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    if threads > 1 {
        eprintln!("MOTOK_THREADS={threads}; running single-threaded");
    }
    let out = cfg.output();
    let or_default = |p: Option<PathBuf>, name: &str| p.unwrap_or_else(|| out.join(name));
    match cli.command {
        Command::SynthData => {
            commands::synth_data(&cfg)?;
        }
        Command::TrainVqvae { resume } => {
            let r = commands::train_vqvae(&cfg, resume.as_deref())?;
            eprintln!("{} steps, checkpoint {}", r.steps, r.checkpoint.display());
        }
        Command::TrainGen { vqvae, resume } => {
            let r = commands::train_gen(&cfg, &or_default(vqvae, VQVAE_CKPT), resume.as_deref())?;
            eprintln!("{} steps, checkpoint {}", r.steps, r.checkpoint.display());
        }
        Command::Generate {
            vqvae,
            gen,
            prompts,
            length,
            iters,
            long,
            transition,
            out: dir,
        } => {
            commands::generate(&GenerateArgs {
                vqvae: or_default(vqvae, VQVAE_CKPT),
                gen: or_default(gen, GEN_CKPT),
                prompts,
                length,
                iters,
                seed: cfg.seed()?,
                long,
                transition,
                out: or_default(dir, "generated"),
            })?;
        }
        Command::Eval {
            vqvae,
            gen,
            generated,
            split,
        } => {
            let split = split.as_deref().map(Split::parse).transpose()?;
            commands::eval(
                &cfg,
                &EvalArgs {
                    vqvae: or_default(vqvae, VQVAE_CKPT),
                    gen,
                    generated,
                    split,
                },
            )?;
        }
        Command::Gradcheck { module, target, instances } => {
            let filter = target.unwrap_or(module);
            let reports = commands::gradcheck(&filter, instances, cfg.seed()?)?;
            let failed = reports.iter().filter(|r| !r.passed).count();
            println!("{} losses checked, {failed} failed", reports.len());
            if failed > 0 {
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::Export { input, out: dest } => commands::export(&cfg, &input, &dest)?,
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    let cli = Cli::parse_from(args);
    let code = match run(cli, overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
