//! Command-line entry point. Exit codes: 0 success, 1 usage error,
//! 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use stepsr::commands::{self, GenScorerChoice, GrpoOpts};
use stepsr_core::rewards::RewardToggles;
use stepsr_core::trace::StepMode;

#[derive(Parser)]
#[command(
    name = "stepsr",
    about = "Step-wise image restoration: data synthesis, training, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StepsModeArg {
    Two,
    Three,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenScorerArg {
    Composite,
    Fidelity,
    Noref,
    Expert,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene/degradation dataset.
    GenData {
        /// Flat key = value config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit the k-means patch codebook on a dataset's HQ images.
    FitCodebook {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 512)]
        k: usize,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised cold-start training on ground-truth traces.
    Coldstart {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Group relative policy optimization from a cold-start checkpoint.
    Grpo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        group: usize,
        #[arg(long, default_value_t = 0.2)]
        eps: f64,
        #[arg(long, default_value_t = 0.01)]
        beta: f64,
        #[arg(long, default_value_t = 1e-5)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        /// Overrides epochs when nonzero: exactly this many batch updates.
        #[arg(long, default_value_t = 0)]
        iterations: usize,
        #[arg(long, default_value_t = 768)]
        max_response: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the dataset's configured trace depth.
        #[arg(long)]
        steps_mode: Option<StepsModeArg>,
        #[arg(long)]
        no_reward_deg: bool,
        #[arg(long)]
        no_reward_und: bool,
        #[arg(long)]
        no_reward_gen: bool,
        #[arg(long, value_enum, default_value_t = GenScorerArg::Composite)]
        gen_scorer: GenScorerArg,
        /// Shell command for the external expert scorer.
        #[arg(long)]
        expert_cmd: Option<String>,
        /// Training-log CSV path; defaults to <out>.log.csv.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset and write the report CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run one greedy trace on an LR image and dump its steps.
    Trace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData {
            config,
            out,
            count,
            seed,
        } => commands::gen_data(config.as_deref(), &out, count, seed),
        Cmd::FitCodebook {
            data,
            k,
            iters,
            seed,
            out,
        } => commands::fit_codebook_cmd(&data, k, iters, seed, &out),
        Cmd::Coldstart {
            data,
            codebook,
            steps,
            out,
            lr,
            seed,
        } => commands::coldstart_cmd(&data, &codebook, steps, &out, lr, seed),
        Cmd::Grpo {
            data,
            codebook,
            init,
            out,
            group,
            eps,
            beta,
            lr,
            batch,
            epochs,
            iterations,
            max_response,
            temperature,
            seed,
            steps_mode,
            no_reward_deg,
            no_reward_und,
            no_reward_gen,
            gen_scorer,
            expert_cmd,
            log,
        } => {
            let opts = GrpoOpts {
                group_size: group,
                clip_eps: eps,
                kl_beta: beta,
                lr,
                batch_size: batch,
                epochs,
                iterations,
                max_response_tokens: max_response,
                temperature,
                seed,
                steps_mode: steps_mode.map(|m| match m {
                    StepsModeArg::Two => StepMode::Two,
                    StepsModeArg::Three => StepMode::Three,
                }),
                toggles: RewardToggles {
                    deg: !no_reward_deg,
                    und: !no_reward_und,
                    gen: !no_reward_gen,
                },
                gen_scorer: match gen_scorer {
                    GenScorerArg::Composite => GenScorerChoice::Composite,
                    GenScorerArg::Fidelity => GenScorerChoice::Fidelity,
                    GenScorerArg::Noref => GenScorerChoice::Noref,
                    GenScorerArg::Expert => GenScorerChoice::Expert,
                },
                expert_cmd,
                log_path: log,
            };
            commands::grpo_cmd(&data, &codebook, &init, &out, &opts)
        }
        Cmd::Eval {
            ckpt,
            data,
            codebook,
            report,
        } => commands::eval_cmd(&ckpt, &data, &codebook, &report),
        Cmd::Trace {
            ckpt,
            codebook,
            image,
            out,
        } => commands::trace_cmd(&ckpt, &codebook, &image, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    // A scorer selection missing its command is a usage error, not runtime.
    if let Cmd::Grpo {
        gen_scorer: GenScorerArg::Expert,
        expert_cmd: None,
        ..
    } = &cli.cmd
    {
        eprintln!("error: --gen-scorer expert requires --expert-cmd");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
