use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use cmm_cli::commands::{self, AblateArgs, RetrieveArgs};
use cmm_cli::error::{CliError, CliResult, EXIT_USAGE};
use cmm_cli::pipeline::SplitName;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cmm", version, about = "Contrastive translation-memory pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic parallel corpus.
    GenSynth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve translation memories for every sentence of a split.
    Retrieve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "contrastive")]
        strategy: String,
        #[arg(long, default_value_t = 0.7)]
        alpha: f64,
        #[arg(long, default_value_t = 5)]
        m: usize,
        #[arg(long, default_value_t = 32)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: SplitName,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        adaptive_cap: Option<usize>,
        /// Write the memory-graph mask of the first non-empty set as a PBM grid.
        #[arg(long)]
        mask_pbm: Option<PathBuf>,
    },
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dotted override such as `loss.lambda=0`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Beam-decode a corpus split with a checkpoint.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Corpus BLEU of a hypothesis file against references.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Also write the report here and record it in a manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score the variant grid and the α and |M| sweeps.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value = "dev")]
        split: SplitName,
        /// Comma-separated subset of the variant grid.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long)]
        no_sweeps: bool,
    },
    /// Dump super-node and target representations as TSV.
    ExportEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
}

fn run(cmd: Cmd) -> CliResult<serde_json::Value> {
    match cmd {
        Cmd::GenSynth { spec, out } => commands::gen_synth(&spec, &out),
        Cmd::Retrieve {
            corpus,
            strategy,
            alpha,
            m,
            k,
            out,
            split,
            seed,
            adaptive_cap,
            mask_pbm,
        } => commands::retrieve(&RetrieveArgs {
            corpus,
            strategy,
            alpha,
            m,
            k,
            out,
            split,
            seed,
            adaptive_cap,
            mask_pbm,
        }),
        Cmd::Train { config, sets } => commands::train(&config, &sets),
        Cmd::Translate {
            ckpt,
            corpus,
            beam,
            out,
            split,
        } => commands::translate(&ckpt, &corpus, beam, &out, split),
        Cmd::Evaluate { hyp, reference, out } => commands::evaluate(&hyp, &reference, out.as_deref()),
        Cmd::Ablate {
            config,
            out,
            sets,
            seeds,
            split,
            variants,
            no_sweeps,
        } => commands::ablate_cmd(&AblateArgs {
            config,
            sets,
            out,
            seeds,
            split,
            variants,
            sweeps: !no_sweeps,
        }),
        Cmd::ExportEmbeddings {
            ckpt,
            corpus,
            n,
            out,
            split,
        } => commands::export_embeddings(&ckpt, &corpus, n, &out, split),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(EXIT_USAGE as u8);
        }
    };
    match run(cli.cmd) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code as u8)
        }
    }
}
