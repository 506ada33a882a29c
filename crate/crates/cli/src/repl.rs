//! Line-oriented chat loop. The operator speaks as SpeakerA, the bot as
//! SpeakerB; the first message opens session 1.

use std::io::{BufRead, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use longmem::backends::Backends;
use longmem::chronicle::{load_episodes, new_episode, save_episodes, SpeakerId, TimeGap};
use longmem::context::StrategyConfig;
use longmem::pipeline::{Conversation, ReplyRequest, TurnRequest};
use longmem_server::ServerConfig;

const HUMAN: SpeakerId = SpeakerId::SpeakerA;
const BOT: SpeakerId = SpeakerId::SpeakerB;

enum Command {
    Gap(TimeGap),
    Memory,
    Reply,
    Save(String),
    Quit,
    Help,
    Say(String),
}

fn parse(line: &str) -> Result<Command> {
    let Some(rest) = line.strip_prefix('/') else {
        return Ok(Command::Say(line.to_string()));
    };
    let mut parts = rest.split_whitespace();
    Ok(match parts.next().unwrap_or("") {
        "gap" => {
            let spec = parts.collect::<Vec<_>>().join(" ");
            Command::Gap(spec.parse().with_context(|| format!("usage: /gap N hours|days (got {spec:?})"))?)
        }
        "memory" => Command::Memory,
        "reply" => Command::Reply,
        "save" => match parts.next() {
            Some(p) => Command::Save(p.to_string()),
            None => bail!("usage: /save PATH"),
        },
        "quit" | "exit" => Command::Quit,
        "help" => Command::Help,
        other => bail!("unknown command /{other}; try /help"),
    })
}

pub fn run(config: Option<&Path>, resume: Option<&Path>, save: Option<&Path>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => ServerConfig::from_toml(&std::fs::read_to_string(p)?)?,
        None => ServerConfig::default(),
    };
    cfg.apply_env()?;
    let backends = cfg.backends.build()?;
    let strategy = cfg.default_strategy.clone();
    strategy.validate()?;
    let episode = match resume {
        Some(p) => load_episodes(p)?.into_iter().next().context("resume file holds no episode")?,
        None => new_episode(vec!["a person chatting with a bot".into()], vec!["a chat bot".into()])?,
    };
    let mut conv = Conversation::new(episode);
    conv.memory.catch_up(&conv.episode, backends.summarizer.as_ref())?;

    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    writeln!(out, "chatting as {HUMAN:?}; /help lists commands")?;
    for line in stdin.lock().lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match parse(line).and_then(|c| step(&mut conv, c, &backends, &strategy, &mut out)) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => writeln!(out, "! {e:#}")?,
        }
        out.flush()?;
    }
    if let Some(p) = save {
        save_episodes(p, std::slice::from_ref(&conv.episode))?;
        writeln!(out, "saved transcript to {}", p.display())?;
    }
    Ok(())
}

/// Applies one command; `false` ends the session.
fn step(
    conv: &mut Conversation,
    cmd: Command,
    backends: &Backends,
    strategy: &StrategyConfig,
    out: &mut impl Write,
) -> Result<bool> {
    match cmd {
        Command::Gap(gap) => {
            let s = conv.open_session(Some(gap))?;
            writeln!(out, "-- session {s} ({gap} later)")?;
        }
        Command::Memory => {
            if conv.memory.all().is_empty() {
                writeln!(out, "(memory is empty)")?;
            }
            for m in conv.memory.all() {
                writeln!(out, "{} {:?}: {}", m.source, m.about, m.text)?;
            }
        }
        Command::Reply => {
            ensure_session(conv)?;
            let r = conv.reply(&ReplyRequest { speaker: BOT, config: None, idempotency_key: None }, backends, strategy)?;
            writeln!(out, "bot: {}", r.reply)?;
        }
        Command::Save(p) => {
            save_episodes(&p, std::slice::from_ref(&conv.episode))?;
            writeln!(out, "saved to {p}")?;
        }
        Command::Quit => return Ok(false),
        Command::Help => {
            writeln!(out, "type a message to talk; /gap N hours|days starts a new session;")?;
            writeln!(out, "/memory shows memory; /reply lets the bot speak; /save PATH; /quit")?;
        }
        Command::Say(text) => {
            ensure_session(conv)?;
            let req = TurnRequest { speaker: HUMAN, text, config: None, idempotency_key: None };
            let r = conv.turn(&req, backends, strategy)?;
            if let longmem::pipeline::MemoryDecisionView::Wrote { entry } = &r.diagnostics.memory {
                writeln!(out, "  [memory] {}", entry.text)?;
            }
            writeln!(out, "bot: {}", r.reply)?;
        }
    }
    Ok(true)
}

fn ensure_session(conv: &mut Conversation) -> Result<()> {
    if conv.episode.sessions.is_empty() {
        conv.open_session(None)?;
    }
    Ok(())
}
