//! Command dispatch for the `fusionbert` binary. Kept as a library so the
//! integration tests can drive it without spawning processes.

use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use fusionbert::container::read_tensor;
use fusionbert::data::config::{load_run_config, RunConfig};
use fusionbert::data::manifest::load_manifest;
use fusionbert::data::pipeline::{
    build_index_from_files, build_object_index, evaluate, load_model, run_gen_data, run_train,
    write_3d_embeddings, write_view_embeddings,
};
use fusionbert::data::selftest::selftest;
use fusionbert::retrieval::{load_index, query_topk};
use fusionbert::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fusionbert",
    about = "Multi-view image and 3D shape retrieval pipeline",
    disable_help_subcommand = true
)]
struct Cli {
    /// Run configuration file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic mesh and feature dataset.
    #[command(name = "gen-data")]
    GenData,
    /// Train one alignment stage (1: 3D encoder, 2: view aggregator).
    #[command(name = "train")]
    Train {
        #[arg(long)]
        stage: u8,
    },
    /// Write each object's 3D embedding to <object>/f3d.fbt.
    #[command(name = "embed-3d")]
    Embed3d,
    /// Write each object's fused view embedding to <object>/fmv.fbt.
    #[command(name = "embed-views")]
    EmbedViews {
        /// How many of the object's views to fuse (default: all).
        #[arg(long)]
        views: Option<usize>,
    },
    /// Build the retrieval index from the written 3D embeddings.
    #[command(name = "build-index")]
    BuildIndex,
    /// Query the index with a 1 x d embedding file; prints rank,object_id,score.
    #[command(name = "query")]
    Query {
        #[arg(long)]
        topk: usize,
        /// Path to a 1 x d FBT1 embedding file.
        input: PathBuf,
    },
    /// Print a views,K,recall table for the dataset.
    #[command(name = "eval")]
    Eval {
        /// View counts to evaluate, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "3")]
        views: Vec<usize>,
        /// Recall cutoffs, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        ks: Vec<usize>,
    },
    /// Run the built-in oracle and property suites.
    #[command(name = "selftest")]
    Selftest,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData => {
            let manifest = run_gen_data(&cfg)?;
            writeln!(
                out,
                "generated {} objects ({} views each) under {}",
                manifest.len(),
                manifest.views,
                cfg.data_dir.display()
            )?;
        }
        Command::Train { stage } => {
            if stage != 1 && stage != 2 {
                return Err(Error::Usage(format!("--stage must be 1 or 2, got {stage}")));
            }
            let outcome = run_train(&cfg, stage)?;
            let last = outcome.log.last().map(|l| l.loss).unwrap_or(f64::NAN);
            let path = if stage == 1 { &cfg.stage1_checkpoint } else { &cfg.stage2_checkpoint };
            writeln!(
                out,
                "stage {stage} done: {} steps, final loss {last:.6}, checkpoint {}",
                outcome.log.len(),
                path.display()
            )?;
        }
        Command::Embed3d => {
            let n = write_3d_embeddings(&cfg)?;
            writeln!(out, "wrote {n} 3d embeddings under {}", cfg.data_dir.display())?;
        }
        Command::EmbedViews { views } => {
            let n = write_view_embeddings(&cfg, views)?;
            writeln!(out, "wrote {n} fused view embeddings under {}", cfg.data_dir.display())?;
        }
        Command::BuildIndex => {
            let index = build_index_from_files(&cfg)?;
            writeln!(
                out,
                "indexed {} embeddings of dim {} into {}",
                index.len(),
                index.dim(),
                cfg.index_file.display()
            )?;
        }
        Command::Query { topk, input } => {
            let index = load_index(&cfg.index_file)?;
            let q = read_tensor::<f32>(&input)?;
            if q.rank() != 2 || q.rows() != 1 {
                return Err(Error::Usage(format!(
                    "query file {} must hold a single 1 x d row",
                    input.display()
                )));
            }
            let result = query_topk(&index, q.data(), topk)?;
            writeln!(out, "rank,object_id,score")?;
            for (r, hit) in result.hits.iter().enumerate() {
                writeln!(out, "{},{},{}", r + 1, hit.object_id, hit.score)?;
            }
        }
        Command::Eval { views, ks } => {
            let manifest = load_manifest(&cfg.data_dir)?;
            let (model, store) = load_model(&cfg, &cfg.stage2_checkpoint)?;
            let index = build_object_index(&manifest, &model, &store)?;
            let rows = evaluate(&manifest, &model, &store, &index, &views, &ks, cfg.eval_aggregator)?;
            writeln!(out, "views,K,recall")?;
            for (v, k, r) in rows {
                writeln!(out, "{v},{k},{r}")?;
            }
        }
        Command::Selftest => {
            selftest(out)?;
            writeln!(out, "selftest passed")?;
        }
    }
    Ok(())
}

/// Parse and execute `args` (including argv[0]); returns the process exit
/// code: 0 success, 1 usage, 2 data, 3 numeric.
pub fn dispatch(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let _ = write!(err, "{e}");
                    1
                }
            };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
