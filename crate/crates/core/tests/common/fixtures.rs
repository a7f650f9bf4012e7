//! Recorded chat replies over config2 states, replayed through the LLM controller.

use std::path::{Path, PathBuf};

use robotline::llm::{build_prompt, prompt_hash, LlmController, ReplayStore, TranscriptRecord};
use robotline::model::ControllerDecision;
use robotline::{LineConfig, SystemState};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
pub struct Fixture {
    pub step: usize,
    pub prompt_hash: String,
    pub reply: String,
    pub state: SystemState,
    #[serde(default)]
    pub expected_error: Option<String>,
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn load(name: &str) -> Vec<Fixture> {
    let path = fixture_dir().join("llm").join(name);
    std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("fixture line parses"))
        .collect()
}

/// Replays one fixture reply through a fresh controller. Errors when the
/// prompt built for the fixture state no longer hashes to the recorded value.
pub fn replay(
    config: &LineConfig,
    fixture: &Fixture,
) -> Result<(ControllerDecision, TranscriptRecord), String> {
    let prompt = build_prompt(config, &fixture.state)
        .map_err(|e| e.to_string())?
        .render();
    if prompt_hash(&prompt) != fixture.prompt_hash {
        return Err(format!("prompt drift at step {}", fixture.step));
    }
    let mut store = ReplayStore::default();
    store.insert(fixture.step, &prompt, fixture.reply.clone());
    let mut controller = LlmController::replay(store);
    let decision = controller
        .llm_decide(&fixture.state, config)
        .map_err(|e| e.to_string())?;
    let record = controller
        .take_transcript()
        .pop()
        .ok_or("no transcript record")?;
    Ok((decision, record))
}
