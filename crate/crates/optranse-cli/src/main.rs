//! Batch pipeline: `prepare` mines path statistics into a cache, `train`
//! fits a model against that cache, `eval` ranks a held-out split, and
//! `paths` prints the retained paths and energies for one triple.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/cache error, 3 numerical
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use optranse_core::config::Settings;
use optranse_core::error::Error;
use optranse_core::eval::{evaluate, EvalConfig};
use optranse_core::fingerprint::Fnv64;
use optranse_core::kg::{build_graph, load_triples, KnowledgeGraph, LoadReport, Split, Triple};
use optranse_core::model::{
    final_energy, read_checkpoint, refresh_transition_cache, write_checkpoint, write_meta,
    ModelParams, TransitionCache,
};
use optranse_core::path::{filtered_path_set, PathCache};
use optranse_core::train::{train_model_with, transition_pairs_of, TrainConfig};
use optranse_core::Result;

#[derive(Parser)]
#[command(
    name = "optranse",
    about = "Knowledge-graph completion with order-preserving relation-path embeddings",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set lr=0.0005 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for preparation and evaluation (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Random seed override (equivalent to --set seed=N).
    #[arg(long)]
    seed: Option<u64>,
    /// Training-split triple file (tab-separated).
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation-split triple file.
    #[arg(long)]
    valid: Option<PathBuf>,
    /// Test-split triple file.
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the graph, mine path statistics and path sets, write the cache.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a cache built from a different graph.
        #[arg(long)]
        force: bool,
    },
    /// Warm start then train the full objective; write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Path cache written by `prepare`.
        #[arg(long)]
        cache: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank a held-out split under a trained checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Path cache written by `prepare`.
        #[arg(long)]
        cache: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Report raw metrics only.
        #[arg(long)]
        raw_only: bool,
    },
    /// Print retained paths, probabilities, and energies for one triple.
    Paths {
        #[command(flatten)]
        common: Common,
        /// Path cache written by `prepare`.
        #[arg(long)]
        cache: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Head entity label.
        head: String,
        /// Relation label (append ^-1 for a reverse relation).
        relation: String,
        /// Tail entity label.
        tail: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes; everything else is usage.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { common, out, force } => cmd_prepare(&common, &out, force),
        Command::Train { common, cache, out } => cmd_train(&common, &cache, &out),
        Command::Eval {
            common,
            cache,
            checkpoint,
            out,
            raw_only,
        } => cmd_eval(&common, &cache, &checkpoint, &out, raw_only),
        Command::Paths {
            common,
            cache,
            checkpoint,
            head,
            relation,
            tail,
        } => cmd_paths(&common, &cache, &checkpoint, &head, &relation, &tail),
    }
}

/// Settings = config file, then --set overrides, then dedicated flags.
fn settings_of(common: &Common) -> Result<Settings> {
    let mut settings = match &common.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    for item in &common.overrides {
        let Some((k, v)) = item.split_once('=') else {
            return Err(Error::Config(format!(
                "--set expects KEY=VALUE, got '{item}'"
            )));
        };
        settings.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        settings.set("seed", &seed.to_string())?;
    }
    if common.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.workers)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size worker pool: {e}")))?;
    }
    Ok(settings)
}

fn dataset_file(flag: &Option<PathBuf>, settings: &Settings, key: &str) -> Option<PathBuf> {
    flag.clone()
        .or_else(|| settings.get(key).map(PathBuf::from))
}

/// Loads the three splits, builds the graph, and adds reverse relations.
fn load_graph(common: &Common, settings: &Settings) -> Result<(KnowledgeGraph, LoadReport)> {
    let order = settings.column_order()?;
    let train_path = dataset_file(&common.train, settings, "train_file")
        .ok_or_else(|| Error::Config("no training file: pass --train or set train_file".into()))?;
    let train = load_triples(&train_path, order)?;
    let valid = match dataset_file(&common.valid, settings, "valid_file") {
        Some(p) => load_triples(&p, order)?,
        None => Vec::new(),
    };
    let test = match dataset_file(&common.test, settings, "test_file") {
        Some(p) => load_triples(&p, order)?,
        None => Vec::new(),
    };
    let (mut graph, report) = build_graph(&train, &valid, &test);
    graph.add_reverse_relations()?;
    Ok((graph, report))
}

fn file_fingerprint(path: &Path) -> Result<u64> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut h = Fnv64::new();
    h.update(&bytes);
    Ok(h.finish())
}

/// Every run drops a manifest sufficient to reproduce it: subcommand,
/// settings echo, seeds, and input fingerprints.
fn write_manifest(
    out_dir: &Path,
    subcommand: &str,
    settings: &Settings,
    resolved: &[(&str, String)],
    inputs: &[(&str, &Path)],
) -> Result<()> {
    let mut text = format!("command = {subcommand}\n");
    for (k, v) in settings.echo() {
        text.push_str(&format!("{k} = {v}\n"));
    }
    for (k, v) in resolved {
        text.push_str(&format!("{k} = {v}\n"));
    }
    for (label, path) in inputs {
        text.push_str(&format!(
            "input {} = {} ({:#018x})\n",
            label,
            path.display(),
            file_fingerprint(path)?
        ));
    }
    let path = out_dir.join("manifest.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("cannot serialize report: {e}")))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn cmd_prepare(common: &Common, out: &Path, force: bool) -> Result<()> {
    let settings = settings_of(common)?;
    ensure_out_dir(out)?;
    let (graph, report) = load_graph(common, &settings)?;
    println!("{report}");
    println!(
        "after reverse augmentation: {} relations, {} train triples",
        graph.relation_count(),
        graph.train().len()
    );

    let cache_path = out.join("path_cache.bin");
    if cache_path.exists() && !force {
        let existing = PathCache::peek_fingerprint(&cache_path)?;
        if existing != graph.fingerprint() {
            eprintln!(
                "refusing to overwrite {} (built for a different graph); pass --force",
                cache_path.display()
            );
            return Err(Error::FingerprintMismatch {
                expected: graph.fingerprint(),
                found: existing,
            });
        }
    }

    let path_cfg = settings.path_config()?;
    let eval_splits = eval_splits_of(&settings)?;
    let cache = PathCache::build(&graph, &path_cfg, &eval_splits)?;
    cache.write_to(&cache_path)?;
    println!(
        "cache: {} path types, {} train sets, {} ranking queries, {} capped expansions",
        cache.stats.pair_count.len(),
        cache.train_sets.len(),
        cache.eval_sets.len(),
        cache.capped_expansions
    );
    write_text(&out.join("load_report.txt"), &format!("{report}\n"))?;

    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    let train_path = dataset_file(&common.train, &settings, "train_file").unwrap();
    inputs.push(("train", train_path.as_path()));
    let valid_path = dataset_file(&common.valid, &settings, "valid_file");
    if let Some(p) = valid_path.as_deref() {
        inputs.push(("valid", p));
    }
    let test_path = dataset_file(&common.test, &settings, "test_file");
    if let Some(p) = test_path.as_deref() {
        inputs.push(("test", p));
    }
    write_manifest(out, "prepare", &settings, &[], &inputs)?;
    println!("wrote {}", cache_path.display());
    Ok(())
}

fn eval_splits_of(settings: &Settings) -> Result<Vec<Split>> {
    match settings.get("eval_split").unwrap_or("test") {
        "test" => Ok(vec![Split::Test]),
        "valid" => Ok(vec![Split::Valid]),
        "both" => Ok(vec![Split::Valid, Split::Test]),
        "none" => Ok(vec![]),
        other => Err(Error::Config(format!(
            "eval_split must be test, valid, both, or none; got '{other}'"
        ))),
    }
}

fn split_flag(settings: &Settings) -> Result<Split> {
    match settings.get("eval_split").unwrap_or("test") {
        "test" => Ok(Split::Test),
        "valid" => Ok(Split::Valid),
        other => Err(Error::Config(format!(
            "eval_split must be test or valid for evaluation; got '{other}'"
        ))),
    }
}

fn load_cache_for(graph: &KnowledgeGraph, cache_path: &Path) -> Result<PathCache> {
    let cache = PathCache::read_from(cache_path)?;
    cache.check_fingerprint(graph)?;
    Ok(cache)
}

fn cmd_train(common: &Common, cache_path: &Path, out: &Path) -> Result<()> {
    let settings = settings_of(common)?;
    ensure_out_dir(out)?;
    let (graph, _) = load_graph(common, &settings)?;
    let cache = load_cache_for(&graph, cache_path)?;
    let config: TrainConfig = settings.train_config()?;
    let checkpoint_every: usize = settings
        .get("checkpoint_every")
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("checkpoint_every: cannot parse '{v}'")))
        })
        .transpose()?
        .unwrap_or(0);

    let ckpt_path = out.join("checkpoint.bin");
    let (params, report, _) = if config.epochs == 0 && config.warm_start_epochs == 0 {
        // Degenerate run: emit the initialization unchanged.
        train_model_with(&graph, Some(&cache), &config, |_, _| Ok(()))?
    } else {
        let periodic = ckpt_path.clone();
        train_model_with(&graph, Some(&cache), &config, move |params, stats| {
            if checkpoint_every > 0 && stats.epoch % checkpoint_every as u64 == 0 {
                write_checkpoint(params, &periodic)?;
            }
            Ok(())
        })?
    };

    write_checkpoint(&params, &ckpt_path)?;
    write_meta(&ckpt_path, &params, &graph, &settings.echo())?;
    write_text(&out.join("train_report.txt"), &report.render_text())?;
    write_json(&out.join("train_report.json"), &report)?;
    write_manifest(
        out,
        "train",
        &settings,
        &[("effective_seed", config.seed.to_string())],
        &[("cache", cache_path)],
    )?;
    println!("wrote {}", ckpt_path.display());
    if let (Some(first), Some(last)) = (report.epochs.first(), report.epochs.last()) {
        println!(
            "loss: {:.6} -> {:.6} over {} epochs",
            first.mean_triple_loss + first.mean_path_loss,
            last.mean_triple_loss + last.mean_path_loss,
            report.epochs.len()
        );
    }
    Ok(())
}

fn load_model_for(
    graph: &KnowledgeGraph,
    checkpoint: &Path,
    settings: &Settings,
) -> Result<ModelParams> {
    let params = read_checkpoint(checkpoint)?;
    if params.entity_count() != graph.entity_count()
        || params.relation_slot_count() != graph.relation_slot_count()
    {
        return Err(Error::Contract(format!(
            "checkpoint shaped for {} entities / {} relation slots, graph has {} / {}",
            params.entity_count(),
            params.relation_slot_count(),
            graph.entity_count(),
            graph.relation_slot_count()
        )));
    }
    if let Some(dim) = settings.get("dim") {
        let dim: usize = dim
            .parse()
            .map_err(|_| Error::Config(format!("dim: cannot parse '{dim}'")))?;
        if dim != params.dim {
            return Err(Error::Contract(format!(
                "checkpoint dimension {} does not match configured dimension {dim}",
                params.dim
            )));
        }
    }
    Ok(params)
}

/// Transition cache covering every pair used by the cached path sets.
fn transition_cache_for(
    params: &ModelParams,
    cache: &PathCache,
    settings: &Settings,
) -> Result<TransitionCache> {
    let m_mode = settings.train_config()?.m_mode;
    let mut needed = transition_pairs_of(&cache.train_sets);
    for sets in cache.eval_sets.values() {
        for (_, set) in sets {
            needed.extend(transition_pairs_of(std::slice::from_ref(set)));
        }
    }
    refresh_transition_cache(params, m_mode, &needed)
}

fn cmd_eval(
    common: &Common,
    cache_path: &Path,
    checkpoint: &Path,
    out: &Path,
    raw_only: bool,
) -> Result<()> {
    let settings = settings_of(common)?;
    ensure_out_dir(out)?;
    let (graph, _) = load_graph(common, &settings)?;
    let cache = load_cache_for(&graph, cache_path)?;
    let params = load_model_for(&graph, checkpoint, &settings)?;
    let tcache = transition_cache_for(&params, &cache, &settings)?;
    let split = split_flag(&settings)?;
    let hits_k: usize = settings
        .get("hits_k")
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("hits_k: cannot parse '{v}'")))
        })
        .transpose()?
        .unwrap_or(10);
    let eval_cfg = EvalConfig { hits_k, raw_only };
    let report = evaluate(&params, &tcache, &graph, &cache, split, &eval_cfg)?;
    let text = report.render_text();
    print!("{text}");
    write_text(&out.join("eval_report.txt"), &text)?;
    write_json(&out.join("eval_report.json"), &report)?;
    write_manifest(
        out,
        "eval",
        &settings,
        &[],
        &[("cache", cache_path), ("checkpoint", checkpoint)],
    )?;
    Ok(())
}

fn resolve_entity(graph: &KnowledgeGraph, label: &str) -> Result<optranse_core::kg::EntityId> {
    graph
        .lookup_entity(label)
        .ok_or_else(|| Error::UnknownLabel {
            label: label.to_owned(),
            suggestions: graph.nearest_entity_labels(label, 3),
        })
}

fn cmd_paths(
    common: &Common,
    cache_path: &Path,
    checkpoint: &Path,
    head: &str,
    relation: &str,
    tail: &str,
) -> Result<()> {
    let settings = settings_of(common)?;
    let (graph, _) = load_graph(common, &settings)?;
    let cache = load_cache_for(&graph, cache_path)?;
    let params = load_model_for(&graph, checkpoint, &settings)?;
    let tcache = transition_cache_for(&params, &cache, &settings)?;

    let h = resolve_entity(&graph, head)?;
    let t = resolve_entity(&graph, tail)?;
    let r = graph
        .lookup_relation(relation)
        .ok_or_else(|| Error::UnknownLabel {
            label: relation.to_owned(),
            suggestions: graph.nearest_relation_labels(relation, 3),
        })?;

    let set = filtered_path_set(&graph, &cache.stats, h, r, t, &cache.config, false);
    println!("query: ({head}, {relation}, {tail})");
    if set.is_empty() {
        println!("no retained paths between the pair");
    }
    for step in 1..=set.max_steps() {
        for inst in set.step(step) {
            let energy = optranse_core::model::path_energy(&params, &tcache, h, &inst.path, t)?;
            println!(
                "  {}-step  {}  reliability {:.6}  confidence {:.6}  energy {:.6}",
                step,
                inst.path.display(&graph),
                inst.reliability,
                inst.confidence,
                energy
            );
        }
    }
    let breakdown = final_energy(&params, &tcache, h, r, t, &set)?;
    println!("direct energy: {:.6}", breakdown.direct);
    for (i, pooled) in breakdown.per_step.iter().enumerate() {
        match pooled {
            Some((e, path)) => println!(
                "pooled {}-step: {:.6} via {}",
                i + 1,
                e,
                path.display(&graph)
            ),
            None => println!("pooled {}-step: none (infinite sentinel)", i + 1),
        }
    }
    match &breakdown.winner {
        optranse_core::model::PoolWinner::Direct => {
            println!(
                "final energy: {:.6} (direct relation wins)",
                breakdown.final_energy
            )
        }
        optranse_core::model::PoolWinner::Path { step, path } => println!(
            "final energy: {:.6} ({}-step path {} wins)",
            breakdown.final_energy,
            step,
            path.display(&graph)
        ),
    }
    let known = graph.contains(&Triple::new(h, r, t));
    println!("fact known in graph: {known}");
    Ok(())
}
