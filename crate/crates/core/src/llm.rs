//! Prompt construction, reply parsing and the chat-completions controller.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::heuristics::{PriorityTable, RulePriority};
use crate::model::{
    encode_state_vector, ControllerDecision, DecisionSource, JointAction, LineConfig, SystemState,
};
use crate::sim::{Controller, ControllerError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("reply contains no action list")]
    NoActionList,
    #[error("reply lists {got} actions for {expected} robots")]
    BadArity { expected: usize, got: usize },
    #[error("machine index {index} out of range for {machines} machines")]
    IndexOutOfRange { index: String, machines: usize },
    #[error("reserved pair element must be 0, found {0}")]
    NonZeroReserved(String),
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("credential variable `{0}` is not set")]
    MissingCredential(String),
    #[error("request failed: {0}")]
    Transport(String),
    #[error("malformed completion response: {0}")]
    BadResponse(String),
    #[error("no recorded reply for step {step} and prompt hash {hash}")]
    MissingReplay { step: usize, hash: String },
    #[error("corrupt transcript record on line {line}: {message}")]
    CorruptRecord { line: usize, message: String },
    #[error("invalid endpoint setting: {0}")]
    Endpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The eight prompt sections, in the order they are sent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_dynamics: String,
    pub parameter_definitions: String,
    pub real_time_state: String,
    pub possible_actions: String,
    pub feasibility_criteria: String,
    pub action_prioritization: String,
    pub output_structure: String,
    pub task_objective: String,
}

pub const SECTION_NAMES: [&str; 8] = [
    "system_dynamics",
    "parameter_definitions",
    "real_time_state",
    "possible_actions",
    "feasibility_criteria",
    "action_prioritization",
    "output_structure",
    "task_objective",
];

const SECTION_TITLES: [&str; 8] = [
    "System dynamics",
    "Parameter definitions",
    "Real-time state",
    "Possible actions",
    "Feasibility criteria",
    "Action prioritization",
    "Output structure",
    "Task objective",
];

impl PromptBundle {
    pub fn sections(&self) -> [(&'static str, &str); 8] {
        [
            (SECTION_NAMES[0], &self.system_dynamics),
            (SECTION_NAMES[1], &self.parameter_definitions),
            (SECTION_NAMES[2], &self.real_time_state),
            (SECTION_NAMES[3], &self.possible_actions),
            (SECTION_NAMES[4], &self.feasibility_criteria),
            (SECTION_NAMES[5], &self.action_prioritization),
            (SECTION_NAMES[6], &self.output_structure),
            (SECTION_NAMES[7], &self.task_objective),
        ]
    }

    /// Single user message: titled sections separated by blank lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (title, (_, body)) in SECTION_TITLES.iter().zip(self.sections()) {
            if !out.is_empty() {
                out.push_str("\n\n");
            }
            let _ = write!(out, "{title}: {body}");
        }
        out
    }
}

/// Collapses whitespace runs, for comparing prompt texts.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptOptions {
    /// Also spell out the feasibility rules of actions 2..M, not only Action 1.
    pub full_feasibility: bool,
    /// Priority order used in the prioritization section; downstream-first if absent.
    pub priorities: Option<PriorityTable>,
}

fn number_word(n: usize) -> String {
    const WORDS: [&str; 21] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
        "nineteen", "twenty",
    ];
    WORDS.get(n).map_or_else(|| n.to_string(), |w| w.to_string())
}

fn capitalized(word: &str) -> String {
    let mut chars = word.chars();
    chars
        .next()
        .map(|c| c.to_uppercase().chain(chars).collect())
        .unwrap_or_default()
}

fn join_and(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn pair(machine: usize) -> String {
    format!("(0,{machine})")
}

fn system_dynamics(config: &LineConfig) -> String {
    let m = config.machine_count;
    let buffers = config.buffer_count();
    let caps = &config.buffer_capacity;
    let buffer_text = if buffers == 1 {
        format!(
            "one in-between buffer with a maximum capacity of {} parts",
            caps[0]
        )
    } else if caps.iter().all(|&c| c == caps[0]) {
        format!(
            "{} in-between buffers, each with a maximum capacity of {} parts",
            number_word(buffers),
            caps[0]
        )
    } else {
        let listed: Vec<String> = caps.iter().map(u32::to_string).collect();
        format!(
            "{} in-between buffers with maximum capacities of {} parts respectively",
            number_word(buffers),
            join_and(&listed)
        )
    };
    let slowest_time = *config.processing_time.iter().max().expect("non-empty");
    let slowest: Vec<usize> = (0..m)
        .filter(|&i| config.processing_time[i] == slowest_time)
        .collect();
    let speed_text = match slowest.as_slice() {
        all if all.len() == m => {
            "All machines have the same processing time.".to_string()
        }
        [one] => format!(
            "Each machine has dedicated processing time, with Machine {} being the slowest \
             (it takes longer to process a part than the others).",
            one + 1
        ),
        several => {
            let names: Vec<String> = several.iter().map(|i| (i + 1).to_string()).collect();
            format!(
                "Each machine has dedicated processing time, with Machines {} being the slowest \
                 (they take longer to process a part than the others).",
                join_and(&names)
            )
        }
    };
    let robots = config.robot_count;
    let robot_text = if robots == 1 {
        "One robot is in the system to handle materials.".to_string()
    } else {
        format!(
            "{} robots are in the system to handle materials.",
            capitalized(&number_word(robots))
        )
    };
    format!(
        "Consider a serial manufacturing system with {} machines (Machines 1\u{2013}{m}) and \
         {buffer_text}. {speed_text} {robot_text}",
        number_word(m)
    )
}

const PARAMETER_DEFINITIONS: &str = "\"running status\" indicates if a machine is up or down: 0 = down, 1 = up;
\"mp-status\" indicates if a machine is loaded with a part: 0 = machine has no part, 1 = machine has a part;
\"progress\" indicates if a machine is processing/has processed a part: 0 = either part processing is completed or no part on the machine at all, 0 < value < 1 = part being processed;
\"robot status\" indicates if a robot is assigned to a machine: 0 = not assigned, 1 = assigned.";

/// Labels of the state-vector entries, in vector order.
pub fn state_labels(machines: usize) -> Vec<String> {
    let mut labels = Vec::with_capacity(5 * machines - 1);
    for field in ["running status", "mp-status", "progress"] {
        labels.extend((1..=machines).map(|i| format!("Machine {i} {field}")));
    }
    labels.extend((1..machines).map(|k| format!("Buffer {k} level")));
    labels.extend((1..=machines).map(|i| format!("Machine {i} robot status")));
    labels
}

fn real_time_state(machines: usize, values: &[String]) -> String {
    let labels = state_labels(machines);
    let last = labels.len() - 1;
    labels
        .iter()
        .zip(values)
        .enumerate()
        .map(|(k, (label, value))| {
            let end = if k == last { '.' } else { ';' };
            format!("{label}: {value}{end}")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn possible_actions(machines: usize) -> String {
    (0..machines)
        .map(|i| {
            let end = if i + 1 == machines { '.' } else { ';' };
            format!("Action {} {}: Load machine {}{end}", i + 1, pair(i), i + 1)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn feasibility_paragraph(config: &LineConfig, i: usize) -> String {
    let n = i + 1;
    let mut lines = vec![
        format!("Action {n} (Load Machine {n}):"),
        "     Feasible if:".to_string(),
    ];
    if i + 1 < config.machine_count {
        lines.push(format!(
            "        Buffer {n} level < {};",
            config.buffer_capacity[i]
        ));
    }
    lines.push(format!(
        "        Machine {n} robot status is 0 (not assigned);"
    ));
    lines.push(format!(
        "        Machine {n} is running (running status = 1);"
    ));
    lines.push("        Either:".to_string());
    if i == 0 {
        lines.push(format!(
            "            Machine {n} mp-status is 0 (not loaded), or"
        ));
    } else {
        lines.push(format!(
            "            Machine {n} mp-status is 0 (not loaded) and Buffer {i} level > 0 \
             (a part is waiting upstream), or"
        ));
    }
    lines.push(format!(
        "            Machine {n} mp-status is 1 and progress is 0 (part has been processed \
         and ready to be unloaded.)"
    ));
    lines.join("\n")
}

fn feasibility_criteria(config: &LineConfig, full: bool) -> String {
    let count = if full { config.machine_count } else { 1 };
    (0..count)
        .map(|i| feasibility_paragraph(config, i))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn action_prioritization(order: &[usize]) -> String {
    let last = order.len() - 1;
    let mut lines =
        vec!["If multiple actions are feasible, they must be prioritized as follows:".to_string()];
    for (rank, &i) in order.iter().enumerate() {
        let head = format!("  Action {} {}", i + 1, pair(i));
        let tail = match rank {
            0 => " has the highest priority if feasible;".to_string(),
            r if r == last => " is the least prioritized action.".to_string(),
            1 => " comes next in priority;".to_string(),
            r => format!(
                " should be prioritized less than Action {};",
                order[r - 1] + 1
            ),
        };
        lines.push(head + &tail);
    }
    lines.join("\n")
}

fn action_list(machines: &[usize]) -> String {
    let pairs: Vec<String> = machines.iter().map(|&i| pair(i)).collect();
    format!("[{}]", pairs.join(", "))
}

fn output_structure(config: &LineConfig) -> String {
    let robots = config.robot_count;
    let example_machine = 2.min(config.machine_count - 1);
    let mut example = vec![example_machine];
    example.resize(robots, 0);
    let idle = action_list(&vec![0; robots]);
    if robots == 1 {
        format!(
            "Only one action can be assigned. For example, if only Action {} is feasible, the \
             output should be: `{}`.\nIf multiple actions are feasible, output the action with \
             the highest priority.\nIf no actions are feasible, return `{idle}` to indicate that \
             no machine can be loaded.",
            example_machine + 1,
            action_list(&example)
        )
    } else {
        let companion = if robots == 2 {
            "it must be accompanied by Action 1 (0,0)"
        } else {
            "it must be accompanied by Action 1 (0,0) for each remaining robot"
        };
        format!(
            "If only one action is feasible, {companion}. For example, if only Action {} is \
             feasible, the output should be: `{}`.\nIf multiple actions are feasible, output the \
             actions in prioritized order.\nIf no actions are feasible, return `{idle}` to \
             indicate that no machine can be loaded.",
            example_machine + 1,
            action_list(&example)
        )
    }
}

fn task_objective(config: &LineConfig) -> String {
    let robots = config.robot_count;
    let who = if robots == 1 {
        "the robot".to_string()
    } else {
        format!("the {} robots", number_word(robots))
    };
    let format_list: Vec<String> = (1..=robots).map(|k| format!("(action{k})")).collect();
    format!(
        "Based on these states, criteria, and the goal of maximizing production throughput, what \
         actions should be assigned to {who}? The output must be in the format `[{}]` without \
         additional details. The feasibility criteria must be strictly followed.",
        format_list.join(", ")
    )
}

fn format_value(value: f64) -> String {
    if value.fract() == 0.0 {
        format!("{}", value as i64)
    } else {
        let text = format!("{value:.4}");
        text.trim_end_matches('0').to_string()
    }
}

fn assemble(config: &LineConfig, values: &[String], options: &PromptOptions) -> PromptBundle {
    let default_order;
    let order = match &options.priorities {
        Some(table) => table.order(),
        None => {
            default_order = PriorityTable::downstream_first(config.machine_count);
            default_order.order()
        }
    };
    PromptBundle {
        system_dynamics: system_dynamics(config),
        parameter_definitions: PARAMETER_DEFINITIONS.to_string(),
        real_time_state: real_time_state(config.machine_count, values),
        possible_actions: possible_actions(config.machine_count),
        feasibility_criteria: feasibility_criteria(config, options.full_feasibility),
        action_prioritization: action_prioritization(order),
        output_structure: output_structure(config),
        task_objective: task_objective(config),
    }
}

/// Prompt with `{state[k]}` placeholders instead of live values.
pub fn prompt_template(config: &LineConfig, options: &PromptOptions) -> PromptBundle {
    let values: Vec<String> = (0..config.state_len())
        .map(|k| format!("{{state[{k}]}}"))
        .collect();
    assemble(config, &values, options)
}

pub fn build_prompt(config: &LineConfig, state: &SystemState) -> Result<PromptBundle, LlmError> {
    build_prompt_with(config, state, &PromptOptions::default())
}

pub fn build_prompt_with(
    config: &LineConfig,
    state: &SystemState,
    options: &PromptOptions,
) -> Result<PromptBundle, LlmError> {
    if let Some(table) = &options.priorities {
        if table.order().len() != config.machine_count {
            return Err(LlmError::Endpoint(format!(
                "priority table covers {} machines, line has {}",
                table.order().len(),
                config.machine_count
            )));
        }
    }
    let vector = encode_state_vector::<f64>(state, config)
        .map_err(|e| LlmError::BadResponse(e.to_string()))?;
    let values: Vec<String> = vector.into_iter().map(format_value).collect();
    Ok(assemble(config, &values, options))
}

fn action_list_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\[\s*\(\s*\d+\s*,\s*\d+\s*\)(?:\s*,\s*\(\s*\d+\s*,\s*\d+\s*\))*\s*\]")
            .expect("valid regex")
    })
}

fn pair_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(\s*(\d+)\s*,\s*(\d+)\s*\)").expect("valid regex"))
}

/// Action list found in a reply together with the remaining prose.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReply {
    pub action: JointAction,
    pub rationale: Option<String>,
}

/// Extracts the first `[(0,a), (0,b), ...]` list of a reply.
pub fn parse_actions(
    reply: &str,
    robot_count: usize,
    machine_count: usize,
) -> Result<JointAction, ParseError> {
    parse_reply(reply, robot_count, machine_count).map(|p| p.action)
}

pub fn parse_reply(
    reply: &str,
    robot_count: usize,
    machine_count: usize,
) -> Result<ParsedReply, ParseError> {
    let found = action_list_regex()
        .find(reply)
        .ok_or(ParseError::NoActionList)?;
    let pairs: Vec<(&str, &str)> = pair_regex()
        .captures_iter(found.as_str())
        .map(|c| {
            let (_, [reserved, machine]) = c.extract();
            (reserved, machine)
        })
        .collect();
    if pairs.len() != robot_count {
        return Err(ParseError::BadArity {
            expected: robot_count,
            got: pairs.len(),
        });
    }
    let mut targets = Vec::with_capacity(robot_count);
    for (reserved, machine) in pairs {
        if !reserved.trim_start_matches('0').is_empty() {
            return Err(ParseError::NonZeroReserved(reserved.to_string()));
        }
        let index = machine
            .parse::<usize>()
            .ok()
            .filter(|&i| i < machine_count)
            .ok_or_else(|| ParseError::IndexOutOfRange {
                index: machine.to_string(),
                machines: machine_count,
            })?;
        targets.push(index);
    }
    let prose = format!("{}{}", &reply[..found.start()], &reply[found.end()..]);
    let prose = prose.trim().trim_matches('`').trim();
    Ok(ParsedReply {
        action: JointAction(targets),
        rationale: (!prose.is_empty()).then(|| prose.to_string()),
    })
}

/// Hands the listed actions, in order, to the idle robots; busy robots keep
/// their machine. The model sees per-machine robot status only, so list
/// positions are not tied to robot identities.
pub fn assign_to_idle(state: &SystemState, listed: &JointAction) -> JointAction {
    let mut queue = listed.targets().iter().copied();
    JointAction(
        state
            .robots
            .iter()
            .map(|robot| match robot.assigned_machine {
                Some(machine) => machine,
                None => queue.next().unwrap_or(0),
            })
            .collect(),
    )
}

pub fn format_actions(action: &JointAction) -> String {
    action_list(action.targets())
}

pub fn prompt_hash(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes())
        .iter()
        .fold(String::with_capacity(64), |mut out, byte| {
            let _ = write!(out, "{byte:02x}");
            out
        })
}

/// Chat-completions endpoint settings. The credential is read from the
/// environment variable named by `api_key_env` when the client is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub timeout: Duration,
    pub retries: u32,
    pub api_key_env: Option<String>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "https://api.openai.com/v1".to_string(),
            model: "gpt-4".to_string(),
            temperature: 0.0,
            timeout: Duration::from_secs(30),
            retries: 2,
            api_key_env: Some("OPENAI_API_KEY".to_string()),
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.timeout.is_zero() {
            return Err(LlmError::Endpoint("timeout must be positive".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(LlmError::Endpoint("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest<'a> {
    pub step: usize,
    pub prompt: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatReply {
    pub text: String,
    pub latency_ms: u64,
}

pub trait ChatClient: Send {
    fn complete(&mut self, request: &ChatRequest<'_>) -> Result<ChatReply, LlmError>;
}

/// Blocking client for `POST {base_url}/chat/completions`.
pub struct HttpChatClient {
    endpoint: EndpointConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpChatClient {
    pub fn new(endpoint: EndpointConfig) -> Result<Self, LlmError> {
        endpoint.validate()?;
        let api_key = match &endpoint.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| LlmError::MissingCredential(var.clone()))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(endpoint.timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Ok(HttpChatClient {
            endpoint,
            agent,
            api_key,
        })
    }

    fn request_once(&self, prompt: &str) -> Result<String, LlmError> {
        let url = format!(
            "{}/chat/completions",
            self.endpoint.base_url.trim_end_matches('/')
        );
        let body = serde_json::json!({
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.endpoint.temperature,
        });
        let mut request = self.agent.post(&url);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let value: serde_json::Value = response
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::BadResponse(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&mut self, request: &ChatRequest<'_>) -> Result<ChatReply, LlmError> {
        let started = Instant::now();
        let mut last = None;
        for _ in 0..=self.endpoint.retries {
            match self.request_once(request.prompt) {
                Ok(text) => {
                    return Ok(ChatReply {
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                    })
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// One exchange with the model. Serialized field order: step, prompt_hash,
/// prompt, reply, parsed, error, fallback_used, latency_ms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub step: usize,
    pub prompt_hash: String,
    pub prompt: String,
    pub reply: Option<String>,
    pub parsed: Option<JointAction>,
    pub error: Option<String>,
    pub fallback_used: bool,
    pub latency_ms: u64,
}

pub fn save_transcript(records: &[TranscriptRecord], path: &Path) -> Result<(), LlmError> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, LlmError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| LlmError::CorruptRecord {
            line: index + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Recorded replies keyed by (step, prompt hash).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayStore {
    replies: HashMap<(usize, String), ChatReply>,
}

impl ReplayStore {
    pub fn from_records(records: &[TranscriptRecord]) -> Self {
        let replies = records
            .iter()
            .filter_map(|r| {
                r.reply.as_ref().map(|text| {
                    (
                        (r.step, r.prompt_hash.clone()),
                        ChatReply {
                            text: text.clone(),
                            latency_ms: r.latency_ms,
                        },
                    )
                })
            })
            .collect();
        ReplayStore { replies }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::from_records(&load_transcript(path)?))
    }

    pub fn insert(&mut self, step: usize, prompt: &str, text: impl Into<String>) {
        self.replies.insert(
            (step, prompt_hash(prompt)),
            ChatReply {
                text: text.into(),
                latency_ms: 0,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }

    pub fn get(&self, step: usize, prompt: &str) -> Result<&ChatReply, LlmError> {
        let hash = prompt_hash(prompt);
        self.replies
            .get(&(step, hash.clone()))
            .ok_or(LlmError::MissingReplay { step, hash })
    }
}

/// Serves recorded replies; never touches the network.
#[derive(Debug, Clone, Default)]
pub struct ReplayClient {
    pub store: ReplayStore,
}

impl ChatClient for ReplayClient {
    fn complete(&mut self, request: &ChatRequest<'_>) -> Result<ChatReply, LlmError> {
        self.store.get(request.step, request.prompt).cloned()
    }
}

/// Offline stand-in for a model: reads the real-time state back out of the
/// prompt text and answers by the prompt's feasibility and priority rules.
#[derive(Debug, Clone)]
pub struct RuleFollowingClient {
    config: LineConfig,
}

impl RuleFollowingClient {
    pub fn new(config: LineConfig) -> Self {
        RuleFollowingClient { config }
    }

    /// Decision implied by the prompt alone.
    pub fn answer(&self, prompt: &str) -> Result<JointAction, LlmError> {
        let m = self.config.machine_count;
        let labels = state_labels(m);
        let mut values = vec![None; labels.len()];
        for line in prompt.lines() {
            let Some((head, rest)) = line.trim().rsplit_once(": ") else {
                continue;
            };
            let label = head.rsplit(": ").next().unwrap_or(head);
            if let Some(k) = labels.iter().position(|l| l == label) {
                let number = rest.trim_end_matches([';', '.']);
                values[k] = number.parse::<f64>().ok();
            }
        }
        let values: Vec<f64> = values
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| LlmError::BadResponse("prompt lacks a complete state".into()))?;
        let running = |i: usize| values[i] > 0.5;
        let has_part = |i: usize| values[m + i] > 0.5;
        let progress = |i: usize| values[2 * m + i];
        let buffer = |k: usize| values[3 * m + k];
        let robot = |i: usize| values[4 * m - 1 + i] > 0.5;
        let feasible = |i: usize| {
            let room = i + 1 == m || buffer(i) < self.config.buffer_capacity[i] as f64;
            let ready = if has_part(i) {
                progress(i) == 0.0
            } else {
                i == 0 || buffer(i - 1) > 0.0
            };
            room && !robot(i) && running(i) && ready
        };
        let mut chosen: Vec<usize> = (0..m).rev().filter(|&i| feasible(i)).collect();
        chosen.truncate(self.config.robot_count);
        chosen.resize(self.config.robot_count, 0);
        Ok(JointAction(chosen))
    }
}

impl ChatClient for RuleFollowingClient {
    fn complete(&mut self, request: &ChatRequest<'_>) -> Result<ChatReply, LlmError> {
        Ok(ChatReply {
            text: format_actions(&self.answer(request.prompt)?),
            latency_ms: 0,
        })
    }
}

/// Dispatches by asking a chat model; any failure falls back to the
/// rule-priority controller. Every query is appended to the transcript.
pub struct LlmController {
    client: Box<dyn ChatClient>,
    fallback: RulePriority,
    options: PromptOptions,
    transcript: Vec<TranscriptRecord>,
}

impl LlmController {
    pub fn new(client: Box<dyn ChatClient>) -> Self {
        LlmController {
            client,
            fallback: RulePriority::new(),
            options: PromptOptions::default(),
            transcript: Vec::new(),
        }
    }

    pub fn with_options(mut self, options: PromptOptions) -> Self {
        self.fallback = match &options.priorities {
            Some(table) => RulePriority::with_table(table.clone()),
            None => RulePriority::new(),
        };
        self.options = options;
        self
    }

    pub fn replay(store: ReplayStore) -> Self {
        Self::new(Box::new(ReplayClient { store }))
    }

    pub fn transcript(&self) -> &[TranscriptRecord] {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Vec<TranscriptRecord> {
        std::mem::take(&mut self.transcript)
    }

    pub fn llm_decide(
        &mut self,
        state: &SystemState,
        config: &LineConfig,
    ) -> Result<ControllerDecision, LlmError> {
        let step = (state.clock / config.step_minutes as u64) as usize;
        let prompt = build_prompt_with(config, state, &self.options)?.render();
        let reply = self.client.complete(&ChatRequest {
            step,
            prompt: &prompt,
        });
        let (text, latency_ms) = match &reply {
            Ok(r) => (Some(r.text.clone()), r.latency_ms),
            Err(_) => (None, 0),
        };
        let parsed = reply.and_then(|r| {
            parse_reply(&r.text, config.robot_count, config.machine_count).map_err(LlmError::from)
        });
        let mut record = TranscriptRecord {
            step,
            prompt_hash: prompt_hash(&prompt),
            prompt,
            reply: text,
            parsed: None,
            error: None,
            fallback_used: false,
            latency_ms,
        };
        let decision = match parsed {
            Ok(ParsedReply { action, rationale }) => {
                record.parsed = Some(action.clone());
                ControllerDecision {
                    joint_action: assign_to_idle(state, &action),
                    rationale,
                    source: DecisionSource::Llm,
                }
            }
            Err(error) => {
                record.error = Some(error.to_string());
                record.fallback_used = true;
                self.fallback.decide_now(state, config)
            }
        };
        self.transcript.push(record);
        Ok(decision)
    }
}

impl Controller for LlmController {
    fn name(&self) -> String {
        "llm".to_string()
    }

    fn decide(
        &mut self,
        state: &SystemState,
        config: &LineConfig,
    ) -> Result<ControllerDecision, ControllerError> {
        Ok(self.llm_decide(state, config)?)
    }
}
