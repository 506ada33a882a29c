use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use longmem::backends::{build_scorer, BackendsConfig, NamedBackend};
use longmem::chronicle::{load_episodes, save_episodes, validate_episode, Episode};
use longmem::context::{ContextSource, StrategyConfig};
use longmem::eval::{
    ablation_report, generate_synthetic, perplexity_table, predict_memories, scorer_corpus, Scope,
    SyntheticSpec,
};
use longmem::ingest::{annotation_sparsity, compute_stats, final_session_table, load_msc};
use longmem::memory::{gold_entries, MemoryEntry, MemoryStore};
use longmem_server::{AppState, ServerConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::Format;

const THREE_STRATEGIES: &str = include_str!("../../../configs/three-strategies.toml");

pub fn load_data(path: &Path, format: Format, split: &str) -> Result<Vec<Episode>> {
    let canonical = match format {
        Format::Canonical => true,
        Format::Msc => false,
        Format::Auto if path.is_dir() => false,
        Format::Auto => {
            let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let first = BufReader::new(file)
                .lines()
                .find(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
                .transpose()?
                .unwrap_or_default();
            let v: serde_json::Value = serde_json::from_str(&first)
                .with_context(|| format!("{}: first line is not JSON", path.display()))?;
            v.get("sessions").is_some()
        }
    };
    let episodes = if canonical {
        load_episodes(path).with_context(|| format!("reading episodes from {}", path.display()))?
    } else {
        load_msc(path, split).with_context(|| format!("reading MSC data from {}", path.display()))?
    };
    Ok(episodes)
}

pub fn ingest(src: &Path, dst: &Path, split: &str) -> Result<()> {
    let episodes = load_msc(src, split).with_context(|| format!("reading {}", src.display()))?;
    let invalid = episodes.iter().filter(|e| !validate_episode(e).is_valid()).count();
    save_episodes(dst, &episodes).with_context(|| format!("writing {}", dst.display()))?;
    println!("wrote {} episodes to {} ({invalid} with validation errors)", episodes.len(), dst.display());
    Ok(())
}

pub fn stats(data: &Path, format: Format, split: &str, json: bool) -> Result<()> {
    let episodes = load_data(data, format, split)?;
    let tokenizer = longmem::backends::ReferenceTokenizer;
    let stats = compute_stats(&episodes, &tokenizer)?;
    let (final_rows, final_totals) = final_session_table(&episodes);
    let sparsity = annotation_sparsity(&episodes).ok();
    if json {
        let out = json!({
            "stats": stats,
            "final_session": final_rows,
            "final_session_totals": final_totals,
            "sparsity": sparsity,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    println!("episodes: {}", stats.episodes);
    println!("{:<10} {:>10} {:>12} {:>10}", "session", "episodes", "utterances", "summaries");
    for (s, row) in &stats.per_session {
        println!("{s:<10} {:>10} {:>12} {:>10}", row.episodes, row.utterances, row.summaries);
    }
    let t = stats.totals;
    println!("{:<10} {:>10} {:>12} {:>10}", "total", t.episodes, t.utterances, t.summaries);
    println!();
    println!("by final session (one row per release file)");
    for (s, row) in &final_rows {
        println!("{s:<10} {:>10} {:>12} {:>10}", row.episodes, row.utterances, row.summaries);
    }
    let t = final_totals;
    println!("{:<10} {:>10} {:>12} {:>10}", "total", t.episodes, t.utterances, t.summaries);
    println!();
    println!(
        "tokens ({}): {} total, {} unique, {:.2} per utterance",
        stats.tokenizer, stats.total_tokens, stats.unique_tokens, stats.avg_utterance_tokens
    );
    if let Some(s) = sparsity {
        println!(
            "annotated turns: {} ({} summary = {:.1}%, {} no-summary = {:.1}%)",
            s.annotated_turns,
            s.summary_turns,
            s.summary_fraction * 100.0,
            s.no_summary_turns,
            s.no_summary_fraction * 100.0
        );
    }
    Ok(())
}

/// Strategy file layout: a list of `[[strategy]]` tables.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StrategyFile {
    #[serde(default)]
    pub strategy: Vec<StrategyConfig>,
}

fn read_strategies(spec: &str) -> Result<Vec<StrategyConfig>> {
    let path = PathBuf::from(spec);
    let named = PathBuf::from("configs").join(format!("{spec}.toml"));
    let text = if path.is_file() {
        std::fs::read_to_string(&path)?
    } else if named.is_file() {
        std::fs::read_to_string(named)?
    } else if spec == "three-strategies" {
        THREE_STRATEGIES.to_string()
    } else {
        bail!("no strategy file {spec:?}");
    };
    let file: StrategyFile = toml::from_str(&text).with_context(|| format!("parsing strategies from {spec}"))?;
    if file.strategy.is_empty() {
        bail!("{spec} defines no [[strategy]] tables");
    }
    for s in &file.strategy {
        s.validate().with_context(|| format!("strategy {}", s.label()))?;
    }
    Ok(file.strategy)
}

fn read_backends(path: Option<&Path>) -> Result<BackendsConfig> {
    let mut cfg = match path {
        Some(p) => BackendsConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => BackendsConfig::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

/// Scorer training texts from episodes: one transcript per session plus
/// every gold summary line in reader form.
fn training_texts(episodes: &[Episode]) -> Vec<String> {
    let mut out = Vec::new();
    for e in episodes {
        for s in &e.sessions {
            out.push(
                s.utterances.iter().map(|u| format!("{}: {}", u.speaker.tag(), u.text)).collect::<Vec<_>>().join("\n"),
            );
            out.extend(s.annotations.iter().filter(|a| !a.is_no_summary).map(|a| format!("your persona: {}", a.text)));
        }
    }
    out
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    if path.extension().is_some_and(|x| x == "txt") {
        let text = std::fs::read_to_string(path)?;
        return Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect());
    }
    Ok(training_texts(&load_data(path, Format::Auto, "train")?))
}

pub struct EvalArgs {
    pub data: PathBuf,
    pub config: String,
    pub scorer: String,
    pub train: Option<PathBuf>,
    pub backends: Option<PathBuf>,
    pub openings_only: bool,
    pub ablation: bool,
    pub format: Format,
    pub json: bool,
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let episodes = load_data(&args.data, args.format, "test")?;
    let strategies = read_strategies(&args.config)?;
    let mut backend_cfg = read_backends(args.backends.as_deref())?;
    backend_cfg.scorer = NamedBackend { name: args.scorer.clone(), ..backend_cfg.scorer };
    let corpus = match &args.train {
        Some(p) => read_corpus(p)?,
        None if args.scorer.contains("ngram") => bail!("the {} scorer needs --train data", args.scorer),
        None => Vec::new(),
    };
    let scorer = build_scorer(&backend_cfg, &corpus)?;
    let backends = backend_cfg.build()?;
    let scope = if args.openings_only { Scope::OpeningsOnly } else { Scope::AllTurns };

    if args.ablation {
        let report = ablation_report(&episodes, &strategies[0], scorer.as_ref(), &backends, scope)?;
        if args.json {
            println!("{}", serde_json::to_string_pretty(&report)?);
        } else {
            for (axis, table) in &report.axes {
                println!("== {axis}");
                print!("{}", table.render());
            }
            let p = &report.predicted_sparsity;
            println!("predicted memory: {} of {} turns written ({:.1}%)", p.written, p.turns, p.fraction * 100.0);
            for t in &report.truncation {
                let cells: Vec<String> =
                    t.sessions.iter().map(|(s, r)| format!("S{s} {:.1}%", r.percent())).collect();
                println!("truncated at L={}: {}", t.truncation, cells.join(", "));
            }
        }
        return Ok(());
    }

    let needs_memory = strategies.iter().any(|s| s.context_source == ContextSource::PredictedSummary);
    let memories = if needs_memory { Some(predict_memories(&episodes, backends.summarizer.as_ref())?) } else { None };
    let table = perplexity_table(&episodes, &strategies, scorer.as_ref(), &backends, memories.as_ref(), scope)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&table)?);
    } else {
        println!("scorer: {}", table.scorer);
        print!("{}", table.render());
    }
    Ok(())
}

pub fn memory(path: &Path, format: Format, gold: bool, backends: Option<&Path>, json: bool) -> Result<()> {
    let episodes = load_data(path, format, "train")?;
    let backends = read_backends(backends)?.build()?;
    let mut views: BTreeMap<String, (Vec<MemoryEntry>, usize)> = BTreeMap::new();
    for e in &episodes {
        let entries = if gold {
            gold_entries(e)
        } else {
            let mut store = MemoryStore::new(&e.id);
            store.catch_up(e, backends.summarizer.as_ref()).with_context(|| format!("episode {}", e.id))?;
            store.all().to_vec()
        };
        views.insert(e.id.clone(), (entries, e.utterance_count()));
    }
    let mut out = std::io::stdout().lock();
    if json {
        let v: Vec<_> = views
            .iter()
            .map(|(id, (entries, turns))| json!({ "episode": id, "turns": turns, "entries": entries }))
            .collect();
        writeln!(out, "{}", serde_json::to_string_pretty(&v)?)?;
        return Ok(());
    }
    for (id, (entries, turns)) in &views {
        writeln!(out, "{id}: {} entries from {turns} turns", entries.len())?;
        for m in entries {
            writeln!(out, "  {} {:?}: {}", m.source, m.about, m.text)?;
        }
    }
    Ok(())
}

pub fn serve(port: Option<u16>, config: Option<&Path>, data_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => ServerConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => ServerConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(p) = port {
        cfg.port = p;
    }
    if let Some(d) = data_dir {
        cfg.data_dir = d;
    }
    let state = Arc::new(AppState::from_config(&cfg)?);
    let addr = SocketAddr::from(([0, 0, 0, 0], cfg.port));
    eprintln!("serving /v1 on http://{addr} (data in {})", cfg.data_dir.display());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(longmem_server::serve(addr, state))?;
    Ok(())
}

pub fn synth(out: &Path, episodes: usize, seed: u64, carryover: f64, corpus_out: Option<&Path>) -> Result<()> {
    let spec = SyntheticSpec { episodes, seed, carryover, ..SyntheticSpec::default() };
    let corpus = generate_synthetic(&spec)?;
    save_episodes(out, &corpus)?;
    println!("wrote {} synthetic episodes to {}", corpus.len(), out.display());
    if let Some(path) = corpus_out {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for text in scorer_corpus(&corpus, &spec) {
            // the tokenizer ignores line breaks, so one line per text loses nothing
            writeln!(f, "{}", text.replace('\n', " "))?;
        }
        f.flush()?;
        println!("wrote scorer corpus to {}", path.display());
    }
    Ok(())
}
