use std::path::Path;
use std::sync::{Arc, RwLock};

use serde_json::Value;
use tokio_util::sync::CancellationToken;

use capy_core::critique::CritiqueTranscript;
use capy_core::eda::{EdaAgent, LoopEvent};
use capy_core::executor::{Executor, ExecutorConfig};
use capy_core::gateway::{Gateway, ProviderEnv};
use capy_core::insight::{extract_graph, to_mermaid};
use capy_core::notebook::{parse_notebook, serialize_notebook, Notebook};
use capy_core::settings::write_atomic;
use capy_core::story::{export_html, StoryEngine};

use crate::config::CliConfig;

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }

    /// Bad flags, configuration or input files.
    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }

    pub fn failed(message: impl Into<String>) -> Self {
        Self::new(1, message)
    }
}

type CmdResult = Result<(), Failure>;

fn read_notebook(path: &Path) -> Result<Notebook, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    parse_notebook(&bytes).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> CmdResult {
    write_atomic(path, bytes).map_err(|e| Failure::failed(format!("cannot write {}: {e}", path.display())))
}

fn gateway(config: &CliConfig) -> Result<Gateway, Failure> {
    config.settings.gateway(&ProviderEnv::from_env()).map_err(|e| Failure::usage(e.to_string()))
}

pub async fn query(
    config: &CliConfig,
    notebook: &Path,
    query: &str,
    output: Option<&Path>,
    transcripts: Option<&Path>,
) -> CmdResult {
    if query.trim().is_empty() {
        return Err(Failure::usage("query is empty"));
    }
    let nb = read_notebook(notebook)?;
    let gateway = gateway(config)?;
    let prompts = config.prompts().map_err(Failure::usage)?;
    let executor = Executor::new(ExecutorConfig::reference());
    let shared = Arc::new(RwLock::new(nb));

    let stop = CancellationToken::new();
    let on_interrupt = stop.clone();
    tokio::spawn(async move {
        if tokio::signal::ctrl_c().await.is_ok() {
            eprintln!("capy: stopping after the current step");
            on_interrupt.cancel();
        }
    });

    let agent = EdaAgent { gateway: &gateway, runner: &executor, prompts: &prompts, config: config.settings.eda_config() };
    let emit = |event: LoopEvent| println!("{}", serde_json::to_string(&event).unwrap());
    let outcome = agent.run_query(&shared, query, &stop, &emit).await;

    let out = output.unwrap_or(notebook);
    write(out, &serialize_notebook(&shared.read().unwrap()))?;
    if let Some(path) = transcripts {
        write(path, &serde_json::to_vec_pretty(&outcome.transcripts).unwrap())?;
    }
    eprintln!(
        "capy: {} cell(s) appended, {} execution(s), {} model call(s); wrote {}",
        outcome.appended.len(),
        outcome.executions,
        gateway.ledger().count(),
        out.display()
    );
    match outcome.terminal {
        LoopEvent::LoopDone { .. } => Ok(()),
        LoopEvent::LoopStopped { .. } => Err(Failure::new(130, "stopped")),
        LoopEvent::LoopFailed { reason, detail } => {
            let reason = serde_json::to_value(reason).unwrap();
            Err(Failure::failed(format!("run failed ({}): {detail}", reason.as_str().unwrap_or_default())))
        }
        other => Err(Failure::failed(format!("unexpected terminal event {}", other.name()))),
    }
}

pub async fn story(config: &CliConfig, notebook: &Path, instructions: &str, output: &Path, json: Option<&Path>) -> CmdResult {
    let nb = read_notebook(notebook)?;
    let gateway = gateway(config)?;
    let prompts = config.prompts().map_err(Failure::usage)?;
    let engine = StoryEngine { gateway: &gateway, prompts: &prompts, config: config.settings.story_config() };
    let outcome = engine.generate(&nb, instructions).await.map_err(|e| Failure::failed(e.to_string()))?;
    outcome
        .story
        .validate(config.settings.max_annotations_per_block)
        .map_err(|e| Failure::failed(format!("story did not validate: {e}")))?;
    let html = export_html(&outcome.story, &nb).map_err(|e| Failure::failed(e.to_string()))?;
    write(output, html.as_bytes())?;
    if let Some(path) = json {
        write(path, &serde_json::to_vec_pretty(&outcome.story).unwrap())?;
    }
    eprintln!(
        "capy: {} block(s), {} annotation(s), {} dropped{}; wrote {}",
        outcome.story.blocks.len(),
        outcome.story.annotations.len(),
        outcome.dropped.len(),
        if outcome.degraded() { ", degraded" } else { "" },
        output.display()
    );
    Ok(())
}

pub async fn insights(config: &CliConfig, notebook: &Path, output: &Path, json: Option<&Path>) -> CmdResult {
    let nb = read_notebook(notebook)?;
    let gateway = gateway(config)?;
    let prompts = config.prompts().map_err(Failure::usage)?;
    let graph = extract_graph(&gateway, &prompts, &nb, config.settings.budget.context_budget)
        .await
        .map_err(|e| Failure::failed(e.to_string()))?;
    graph.validate().map_err(|e| Failure::failed(format!("graph did not validate: {e}")))?;
    write(output, to_mermaid(&graph).as_bytes())?;
    if let Some(path) = json {
        write(path, &serde_json::to_vec_pretty(&graph).unwrap())?;
    }
    let nodes: usize = graph.questions.iter().map(|q| q.nodes.len()).sum();
    eprintln!("capy: {} question(s), {nodes} node(s); wrote {}", graph.questions.len(), output.display());
    Ok(())
}

/// Accounting lines for one transcript, and whether it is consistent.
pub fn accounting(index: usize, t: &CritiqueTranscript) -> (String, bool) {
    let waves = CritiqueTranscript::count_waves(&t.rounds);
    let critiques: usize = t.rounds.iter().map(|r| r.critiques.len()).sum();
    let rejections: Vec<_> = t.rounds.iter().filter_map(|r| r.decision.as_ref()).flat_map(|d| &d.rejected).collect();
    let unjustified = rejections.iter().filter(|r| r.rationale.trim().is_empty()).count();
    let task = serde_json::to_value(t.task).unwrap();
    let termination = serde_json::to_value(t.termination).unwrap();
    let ok = waves == t.wave_count && unjustified == 0;
    let text = format!(
        "transcript {index}: task {}, max_rounds {}, termination {}\n  rounds {}, critiques {critiques}, refiner calls {}, rejections {} ({unjustified} without rationale)\n  waves {waves} (recorded {}){}\n  gateway calls {}",
        task.as_str().unwrap_or_default(),
        t.max_rounds,
        termination.as_str().unwrap_or_default(),
        t.rounds.len(),
        t.refiner_calls(),
        rejections.len(),
        t.wave_count,
        if waves == t.wave_count { "" } else { " MISMATCH" },
        t.expected_calls(),
    );
    (text, ok)
}

pub fn replay(path: &Path) -> CmdResult {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let items = match value {
        Value::Array(items) => items,
        single => vec![single],
    };
    let transcripts: Vec<CritiqueTranscript> = items
        .into_iter()
        .map(serde_json::from_value)
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::usage(format!("{}: not a critique transcript: {e}", path.display())))?;
    let mut consistent = true;
    let mut total_waves = 0;
    let mut total_calls = 0;
    for (i, t) in transcripts.iter().enumerate() {
        let (text, ok) = accounting(i + 1, t);
        println!("{text}");
        consistent &= ok;
        total_waves += t.wave_count;
        total_calls += t.expected_calls();
    }
    println!("total: {} transcript(s), {total_waves} wave(s), {total_calls} gateway call(s)", transcripts.len());
    if consistent {
        Ok(())
    } else {
        Err(Failure::failed("transcript accounting is inconsistent"))
    }
}
