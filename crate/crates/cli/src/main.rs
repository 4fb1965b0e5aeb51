use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lmaug_cli::commands::{self, Common, EvalArgs};
use lmaug_cli::Failure;

/// Language models trained on simulated recognition errors: training,
/// error statistics, evaluation and n-best rescoring.
#[derive(Parser, Debug)]
#[command(name = "lmaug", version)]
struct Cli {
    /// Configuration file (experiment JSON; benchmark JSON for `synth`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Pretrain with the configured augmentation, then finetune.
    Train,
    /// Harvest confusion statistics from n-best lists.
    Stats {
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        /// Word list; defaults to the words seen in the inputs.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Sweep the interpolation weight on dev, then score eval at the optimum.
    Rescore {
        /// Defaults to `model.ckpt.json` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Perplexity, simulated perplexity and target-corrupted perplexity.
    EvalPpl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Session file; when given, state is carried within sessions.
        #[arg(long)]
        sessions: Option<PathBuf>,
        /// Channel JSON, e.g. `{"type":"zerogram","p_sub":0.23,"p_del":0.15}`.
        #[arg(long)]
        channel: Option<PathBuf>,
        /// Corruption realizations.
        #[arg(short, long, default_value_t = 100)]
        k: usize,
    },
    /// Dump the corrupted training pairs of one pretraining epoch.
    Corrupt {
        #[arg(long, default_value_t = 1)]
        epoch: usize,
        /// Only the first N sentences.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Word error rate of `<utt_id> words...` hypothesis lines.
    Wer {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
    },
    /// Generate the synthetic benchmark.
    Synth,
}

fn run(cli: Cli) -> Result<serde_json::Value, Failure> {
    let common = Common {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.cmd {
        Cmd::Train => commands::train(&common),
        Cmd::Stats { nbest, refs, vocab } => commands::stats(&common, &nbest, &refs, vocab.as_deref()),
        Cmd::Rescore { checkpoint } => commands::rescore(&common, checkpoint.as_deref()),
        Cmd::EvalPpl {
            checkpoint,
            corpus,
            sessions,
            channel,
            k,
        } => commands::eval_ppl(
            &common,
            &EvalArgs {
                checkpoint: &checkpoint,
                corpus: &corpus,
                sessions: sessions.as_deref(),
                channel: channel.as_deref(),
                k,
            },
        ),
        Cmd::Corrupt { epoch, limit } => commands::corrupt(&common, epoch, limit),
        Cmd::Wer { reference, hyp } => commands::wer_cmd(&common, &reference, &hyp),
        Cmd::Synth => commands::synth(&common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("lmaug: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
