//! Command-line interface: config parsing, subcommand dispatch, and report
//! output.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 numeric/contract errors,
//! 4 I/O errors. Output paths from the config or flags; the
//! `BLOCKFILL_OUT_DIR` environment variable re-roots relative output paths.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{parse_config, Overrides, RunConfig};
use crate::engine::{
    prefill_blockwise, prefill_bulk, prefill_hybrid, EngineOptions, PrefillMode, PrefillResult,
};
use crate::error::Result;
use crate::eviction::{plan_budgets, BudgetMode};
use crate::harness::{
    self, decode_attention_mass, eval_retention, gen_needle_haystack, pilot_layer_entropy,
    random_embeddings, RunReport,
};
use crate::model::init_model;
use crate::report::write_reports;

/// Environment variable that re-roots relative report paths.
pub const OUT_DIR_ENV: &str = "BLOCKFILL_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "blockfill",
    about = "Memory-bounded block-wise prefill engine with KV-cache eviction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML configuration file; flags below override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Model seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Retention budget per (layer, head) override.
    #[arg(long, global = true)]
    pub budget: Option<usize>,

    /// Prefill block size override.
    #[arg(long, global = true)]
    pub block_size: Option<usize>,

    /// Eviction policy override: snapkv, keydiff, or random.
    #[arg(long, global = true)]
    pub policy: Option<String>,

    /// Prefill mode override: bulk, blockwise, or hybrid.
    #[arg(long, global = true)]
    pub mode: Option<String>,

    /// CSV report path.
    #[arg(long, global = true)]
    pub csv: Option<PathBuf>,

    /// JSON report path.
    #[arg(long, global = true)]
    pub json: Option<PathBuf>,

    /// Include measured wall-clock times in reports (makes output
    /// machine-dependent).
    #[arg(long, global = true)]
    pub wall_clock: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One prefill run from the configuration.
    Run,
    /// Peak memory vs input size: full-cache against block-wise prefill.
    SweepInput {
        /// Comma-separated tile counts.
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16, 32])]
        tiles: Vec<usize>,
    },
    /// Peak memory and latency proxy vs retention budget.
    SweepBudget {
        /// Comma-separated budgets.
        #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096])]
        budgets: Vec<usize>,
    },
    /// Needle retention and peaks vs block size and structure alignment.
    SweepBlocksize {
        /// Comma-separated block sizes.
        #[arg(long, value_delimiter = ',', default_values_t = [32usize, 49, 98])]
        block_sizes: Vec<usize>,
        /// Tokens per tile of the underlying needle task.
        #[arg(long, default_value_t = 49)]
        tile_tokens: usize,
    },
    /// Needle retention under each eviction policy.
    ComparePolicies,
    /// Cache compression vs strided input reduction at equal budget.
    CompareReduction,
}

fn resolve_out_path(path: Option<PathBuf>) -> Option<PathBuf> {
    let path = path?;
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() => Some(Path::new(&dir).join(path)),
        _ => Some(path),
    }
}

/// Parses config + flags, runs the subcommand, writes reports, and prints a
/// one-line summary.
pub fn execute(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        mode: cli.mode.clone(),
        block_size: cli.block_size,
        policy: cli.policy.clone(),
        budget: cli.budget,
        csv: cli.csv.clone(),
        json: cli.json.clone(),
        wall_clock: cli.wall_clock,
    };
    let config = parse_config(cli.config.as_deref(), &overrides)?;
    let seed = config.model.seed;

    let reports = match &cli.command {
        Command::Run => run_single(&config)?,
        Command::SweepInput { tiles } => harness::sweep_input_size(seed, tiles, 256)?,
        Command::SweepBudget { budgets } => harness::sweep_budget(seed, budgets)?,
        Command::SweepBlocksize { block_sizes, tile_tokens } => {
            harness::sweep_block_size(seed, block_sizes, *tile_tokens)?
        }
        Command::ComparePolicies => harness::compare_policies(seed)?,
        Command::CompareReduction => {
            harness::compare_reduction(seed, cli.budget.unwrap_or(1024))?
        }
    };

    write_reports(
        &reports,
        resolve_out_path(config.output.csv.clone()).as_deref(),
        resolve_out_path(config.output.json.clone()).as_deref(),
        config.output.wall_clock,
    )?;

    let first = &reports[0];
    let retention = first
        .needle_retention
        .map(|r| format!("{r:.4}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "rows={} global_peak_bytes={} ttft_flops={} needle_retention={retention}",
        reports.len(),
        first.global_peak_bytes,
        first.ttft_flops
    );
    Ok(())
}

/// Executes the `run` subcommand: one prefill over the configured layout.
fn run_single(config: &RunConfig) -> Result<Vec<RunReport>> {
    let model_config = config.model_config();
    let model = init_model(&model_config)?;
    let layout = config.build_layout()?;

    let needle = match config.task.needle_segment {
        Some(seg) => {
            let kappa = config.task.kappa.unwrap_or(64.0);
            Some(gen_needle_haystack(&model, &layout, seg, kappa, model_config.seed)?)
        }
        None => None,
    };
    let embeddings = match &needle {
        Some((emb, _)) => emb.clone(),
        None => random_embeddings(
            model_config.seed.wrapping_add(1),
            layout.total_len,
            model_config.d_model,
        ),
    };

    let layer_stats = match config.budget_mode()? {
        BudgetMode::Static => None,
        BudgetMode::Dynamic => Some(pilot_layer_entropy(&model, &layout, &embeddings)?),
    };
    let plan = plan_budgets(
        config.budget_mode()?,
        model_config.layers,
        config.prefill.budget,
        layer_stats.as_deref(),
        config.prefill.block_size,
    )?;

    let opts = EngineOptions {
        proxy_mode: config.proxy_mode()?,
        protect_prompt: config.prefill.protect_prompt,
        protect_recent: config.prefill.protect_recent,
        precision_bytes: 2,
    };
    let policy = config.policy()?;
    let align = config.align()?;
    let b = config.prefill.block_size;

    let result: PrefillResult = match config.mode()? {
        PrefillMode::Bulk => prefill_bulk(&model, &layout, &embeddings, &opts)?,
        PrefillMode::Blockwise => {
            prefill_blockwise(&model, &layout, &embeddings, policy, &plan, b, align, &opts)?
        }
        PrefillMode::Hybrid => {
            prefill_hybrid(&model, &layout, &embeddings, policy, &plan, b, align, &opts)?
        }
    };

    let mut report = RunReport::from_result(
        &result,
        config.echo(),
        &config.prefill.policy,
        config.prefill.budget,
        b,
        &config.prefill.mode,
    )?;
    if let Some((emb, task)) = &needle {
        report.needle_retention = Some(eval_retention(&result, task));
        report.decode_attention_mass_on_needle =
            Some(decode_attention_mass(&model, &result, emb, task)?);
    }
    Ok(vec![report])
}
