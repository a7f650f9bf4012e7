//! Regenerates `fixtures/llm/*.ndjson`: recorded replies over config2 states.
//!
//! Well-formed replies come from the prompt-reading stand-in model and are
//! dressed in the formats chat models tend to produce. Malformed replies
//! cover every parse error class.

use std::collections::HashSet;
use std::io::Write;

use robotline::heuristics::RulePriority;
use robotline::llm::{build_prompt, format_actions, prompt_hash, RuleFollowingClient};
use robotline::sim::run_episode;
use robotline::LineConfig;
use serde_json::json;

fn dress(style: usize, list: &str) -> String {
    match style % 6 {
        0 => list.to_string(),
        1 => list.replace(", ", ","),
        2 => format!("`{list}`"),
        3 => format!("Applying the feasibility criteria and priorities:\n{list}"),
        4 => list.replace('(', "( ").replace(')', " )").replace(",", ", "),
        _ => format!("Output: {list}\nHigher-priority actions are listed first."),
    }
}

const MALFORMED: [(&str, &str); 12] = [
    ("Load machine 3 please", "no_action_list"),
    ("", "no_action_list"),
    ("[(0,2), (0,0)", "no_action_list"),
    ("((0,2), (0,0))", "no_action_list"),
    ("[0,2,0,0]", "no_action_list"),
    ("[(0,-1), (0,0)]", "no_action_list"),
    ("[(0,2)]", "bad_arity"),
    ("[(0,3), (0,2), (0,1)]", "bad_arity"),
    ("[(0,7), (0,0)]", "index_out_of_range"),
    ("[(0,4), (0,3)]", "index_out_of_range"),
    ("[(0,99999999999999999999999), (0,0)]", "index_out_of_range"),
    ("[(1,2), (0,0)]", "non_zero_reserved"),
];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = LineConfig::config2();
    let model = RuleFollowingClient::new(config.clone());
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/llm");
    std::fs::create_dir_all(&dir)?;

    let mut seen = HashSet::new();
    let mut picked = Vec::new();
    for seed in 0..10u64 {
        let trace = run_episode(&config, &mut RulePriority::new(), seed, config.horizon)?;
        let mut state = robotline::sim::reset(&config, seed);
        for record in &trace.records {
            if record.requested.is_some() {
                let prompt = build_prompt(&config, &state)?.render();
                let answer = model.answer(&prompt)?;
                let key = (format_actions(&answer), state.buffers.clone(), state.robots.iter().filter(|r| r.is_idle()).count());
                if seen.insert(key) {
                    picked.push((record.step, state.clone(), prompt, answer));
                }
            }
            state = record.state.clone();
        }
    }
    picked.truncate(60);

    let mut out = std::fs::File::create(dir.join("wellformed.ndjson"))?;
    for (k, (step, state, prompt, answer)) in picked.iter().enumerate() {
        let line = json!({
            "step": step,
            "prompt_hash": prompt_hash(prompt),
            "reply": dress(k, &format_actions(answer)),
            "state": state,
        });
        writeln!(out, "{line}")?;
    }
    let mut out = std::fs::File::create(dir.join("malformed.ndjson"))?;
    for (k, (reply, kind)) in MALFORMED.iter().enumerate() {
        let (step, state, prompt, _) = &picked[k * 3];
        let line = json!({
            "step": step,
            "prompt_hash": prompt_hash(prompt),
            "reply": reply,
            "expected_error": kind,
            "state": state,
        });
        writeln!(out, "{line}")?;
    }
    println!("{} well-formed, {} malformed", picked.len(), MALFORMED.len());
    Ok(())
}
