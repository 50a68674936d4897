use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use uniah::analysis;
use uniah::cases;
use uniah::ragsim::{self, ChunkOrder, EmbeddingProvider, RetrievalScope};
use uniah::runner::{self, Harness, RunConfig, TrialMode};
use uniah::scoring;

#[derive(Parser)]
#[command(name = "uniah", about = "Needle-in-a-haystack evaluation harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a case file against the schema and invariants.
    Validate {
        /// Case JSON file
        case: PathBuf,
    },
    /// Assemble one context and print it as JSON (text, spans, provenance).
    Assemble {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        case: String,
        #[arg(long)]
        length: usize,
        /// Needle depth as a percentage in (0, 100]
        #[arg(long)]
        depth: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write JSON here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute the experiment grid, appending to a resumable JSONL log.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
    },
    /// Chunk + retrieve for one assembled context and report recall metrics.
    Recall {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        case: String,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 50)]
        depth: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// top<K>, half, or full
        #[arg(long, default_value = "top5")]
        scope: String,
        /// norm or rev
        #[arg(long, default_value = "norm")]
        order: String,
        /// Also print one JSON line per kept chunk
        #[arg(long)]
        dump_index: bool,
    },
    /// Score a single answer against a reference with the configured judge.
    Judge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        reference: String,
        #[arg(long)]
        answer: String,
    },
    /// Aggregate a result log into CSV tables and a JSON summary.
    Analyze {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render a matrix CSV (as written by analyze) to an SVG heatmap.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<(RunConfig, Harness)> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: RunConfig = serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let harness = runner::load_harness(&config, base).map_err(anyhow::Error::msg)?;
    Ok((config, harness))
}

fn parse_scope(s: &str) -> Result<RetrievalScope> {
    match s {
        "half" => Ok(RetrievalScope::HalfLength),
        "full" => Ok(RetrievalScope::FullLength),
        _ => {
            let k = s
                .strip_prefix("top")
                .and_then(|k| k.parse::<usize>().ok())
                .with_context(|| format!("bad scope {s:?}; expected top<K>, half, or full"))?;
            Ok(RetrievalScope::TopK(k))
        }
    }
}

fn parse_order(s: &str) -> Result<ChunkOrder> {
    match s {
        "norm" => Ok(ChunkOrder::Norm),
        "rev" => Ok(ChunkOrder::Rev),
        _ => bail!("bad order {s:?}; expected norm or rev"),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { case } => {
            let c = cases::load_case(&case)?;
            println!("ok: case {} with {} needles", c.id, c.flat_needles().len());
        }
        Command::Assemble { config, case, length, depth, seed, out } => {
            let (_, harness) = load_config(&config)?;
            let c = harness.case(&case)?;
            let ctx = runner::assemble_for(&harness, c, length, depth, seed).map_err(anyhow::Error::msg)?;
            let json = serde_json::to_string_pretty(&ctx)?;
            match out {
                Some(p) => fs::write(&p, json).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{json}"),
            }
        }
        Command::Run { config, log, concurrency } => {
            let (cfg, harness) = load_config(&config)?;
            let plan = runner::plan(&cfg.grid, &harness)?;
            eprintln!(
                "planned {} trials ({} excluded over context)",
                plan.trials.len(),
                plan.excluded_over_context
            );
            let summary = runner::run(&plan, &harness, &log, concurrency)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Recall { config, case, length, depth, seed, scope, order, dump_index } => {
            let (_, harness) = load_config(&config)?;
            let c = harness.case(&case)?;
            let ctx = runner::assemble_for(&harness, c, length, depth, seed).map_err(anyhow::Error::msg)?;
            let chunks = ragsim::chunk(&ctx.text, c, &harness.chunking, &harness.counter);
            let provider = EmbeddingProvider::deterministic(harness.embedding_dimension);
            let ranking = ragsim::retrieve(&c.question, &chunks, &provider, chunks.len())?;
            let set = ragsim::apply_scope(
                &ranking,
                parse_scope(&scope)?,
                parse_order(&order)?,
                length,
                harness.reserved_prompt_tokens(c),
                &harness.counter,
                c,
            );
            println!(
                "{}",
                serde_json::json!({
                    "case": c.id,
                    "total_chunks": chunks.len(),
                    "kept_chunks": set.ranked.len(),
                    "noise_ratio": set.noise_ratio,
                    "needle_recall": set.needle_recall,
                    "element_recall": set.element_recall,
                    "over_budget": set.over_budget,
                })
            );
            if dump_index {
                for chunk in ragsim::order_chunks(&set) {
                    println!("{}", ragsim::index_dump_line(chunk));
                }
            }
        }
        Command::Judge { config, question, reference, answer } => {
            let (_, harness) = load_config(&config)?;
            let backend = harness.backend(&harness.judge_backend)?;
            let score = scoring::judge(&question, &reference, &answer, backend, &harness.rubric)?;
            println!("{}", serde_json::to_string(&score)?);
        }
        Command::Analyze { log, out_dir } => {
            let results = runner::read_log(&log)?;
            if results.is_empty() {
                bail!("no trials in {}", log.display());
            }
            fs::create_dir_all(&out_dir)?;
            let backends: BTreeSet<String> = results.iter().map(|r| r.key.backend_id.clone()).collect();
            for backend in &backends {
                for (kind, is_rag) in [("lc", false), ("rag", true)] {
                    let m = analysis::matrix(&results, |r| {
                        r.key.backend_id == *backend && r.key.mode.is_rag() == is_rag
                    });
                    if let Ok(m) = m {
                        let csv = out_dir.join(format!("matrix_{backend}_{kind}.csv"));
                        let svg = out_dir.join(format!("matrix_{backend}_{kind}.svg"));
                        analysis::emit_heatmap(&m, &csv, &svg)?;
                    }
                }
            }
            let buckets = analysis::default_buckets();
            fs::write(out_dir.join("buckets.csv"), analysis::bucket_table_csv(&analysis::bucket_summary(&results, &buckets)))?;
            let errors = analysis::error_correlates(&results, &buckets);
            fs::write(out_dir.join("error_ledger.csv"), analysis::error_ledger_csv(&errors))?;
            let win = analysis::win_rate(&results).ok();
            let has_lc = results.iter().any(|r| matches!(r.key.mode, TrialMode::Lc));
            let summary = serde_json::json!({
                "trials": results.len(),
                "failures": results.iter().filter(|r| r.failure.is_some()).count(),
                "has_lc": has_lc,
                "win_rate": win.as_ref().map(|w| w.win_rate),
                "paired": win.as_ref().map(|w| w.pairs.len()),
                "unpaired": win.as_ref().map(|w| w.unpaired),
                "noise_missing_stump": errors.noise_missing_stump,
                "noise_extra_stump": errors.noise_extra_stump,
            });
            let summary_path = out_dir.join("summary.json");
            fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
            println!("wrote analysis to {}", out_dir.display());
        }
        Command::Plot { csv, out } => {
            let raw = fs::read_to_string(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let m = analysis::matrix_from_csv(&raw)?;
            fs::write(&out, analysis::matrix_to_svg(&m)).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
