//! Scenario runner: drives a [`Network`] through a timeline of events,
//! records the trace and checks expectations.

pub mod canon;
pub mod scenario;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::ids::{AppId, KeyId, LinkId};
use crate::network::{LinkUsage, Network, NetworkConfig, Outcome};
use crate::protocol::{decode_trace, encode_trace, CodecError, Envelope, FaultAction, FaultEvent, FaultRule};
use crate::qusec::QusecDump;
use crate::topology::{load_topology, Topology, TopologyError, WeightPolicy};

pub use canon::{canonical_trace, canonicalize, diff_records, trace_compare, TraceDiff};
pub use scenario::{Event, Expectations, Scenario, ScenarioConfig};

/// Exit code for a run whose expectations all hold.
pub const EXIT_OK: i32 = 0;
/// Exit code for an expectation failure.
pub const EXIT_EXPECTATION: i32 = 1;
/// Exit code for unreadable or invalid input.
pub const EXIT_CONFIG: i32 = 2;

const DEFAULT_STEP_BUDGET: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("trace {path}: {source}")]
    Trace { path: PathBuf, source: CodecError },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        EXIT_CONFIG
    }
}

pub fn read_file(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_owned(), source })
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: u64,
    pub weight_policy: Option<WeightPolicy>,
    pub cache_ttl_ms: Option<u64>,
    /// Directory that relative paths in the scenario resolve against.
    pub base_dir: Option<PathBuf>,
    pub step_budget: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { seed: 0, weight_policy: None, cache_ttl_ms: None, base_dir: None, step_budget: DEFAULT_STEP_BUDGET }
    }
}

impl RunOptions {
    pub fn seeded(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    fn resolve(&self, rel: &str) -> PathBuf {
        match &self.base_dir {
            Some(dir) => dir.join(rel),
            None => PathBuf::from(rel),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestReport {
    pub label: Option<String>,
    pub app: AppId,
    pub target: AppId,
    pub request: &'static str,
    pub status: String,
    pub key_id: Option<KeyId>,
    pub requested_at: u64,
    pub completed_at: u64,
}

impl From<&Outcome> for RequestReport {
    fn from(o: &Outcome) -> Self {
        Self {
            label: o.label.clone(),
            app: o.app.clone(),
            target: o.target.clone(),
            request: o.request,
            status: o.status.as_str().to_owned(),
            key_id: o.key_id.clone(),
            requested_at: o.requested_at,
            completed_at: o.completed_at,
        }
    }
}

/// Final state of a run. Key material is deliberately left out.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub seed: u64,
    pub quiescent: bool,
    pub final_time_ms: u64,
    pub messages_delivered: u64,
    pub requests: Vec<RequestReport>,
    pub not_run: Vec<String>,
    pub message_counts: BTreeMap<String, u64>,
    pub link_usage: BTreeMap<LinkId, LinkUsage>,
    pub total_keys_used: u64,
    pub controller: QusecDump,
    pub faults: Vec<FaultEvent>,
    pub notes: Vec<String>,
    pub failures: Vec<String>,
    pub trace_diff: Option<TraceDiff>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            EXIT_OK
        } else {
            EXIT_EXPECTATION
        }
    }
}

#[derive(Debug)]
pub struct RunOutput {
    pub trace: Vec<Envelope>,
    pub report: Report,
    pub network: Network,
}

impl RunOutput {
    /// Raw JSON-lines trace.
    pub fn trace_text(&self) -> String {
        encode_trace(&self.trace)
    }

    /// Outcome of the request with this label.
    pub fn outcome(&self, label: &str) -> Option<Outcome> {
        self.network.outcomes().into_iter().find(|o| o.label.as_deref() == Some(label))
    }

    pub fn exit_code(&self) -> i32 {
        self.report.exit_code()
    }
}

/// Count of delivered messages per type.
pub fn message_counts(trace: &[Envelope]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for e in trace {
        *counts.entry(e.msg.type_name().to_owned()).or_insert(0) += 1;
    }
    counts
}

fn check_references(topology: &Topology, scenario: &Scenario) -> Result<(), HarnessError> {
    let app = |a: &AppId| topology.resolve_app(a).map(|_| ()).map_err(HarnessError::from);
    let mut labels = BTreeSet::new();
    for e in &scenario.events {
        match e {
            Event::GetKey { app: a, target, label, .. } => {
                app(a)?;
                app(target)?;
                labels.extend(label.as_deref());
            }
            Event::GetKeyWithId { app: a, target, key_of, label, .. } => {
                app(a)?;
                app(target)?;
                if let Some(k) = key_of {
                    if !labels.contains(k.as_str()) {
                        return Err(HarnessError::Scenario(format!("key_of {k} names no earlier request")));
                    }
                }
                labels.extend(label.as_deref());
            }
            Event::TickLinks { link: Some(l), .. } if topology.link(l).is_none() => {
                return Err(HarnessError::Scenario(format!("unknown link {l}")));
            }
            _ => {}
        }
    }
    for l in scenario.expect.pool_consumed.keys() {
        if topology.link(l).is_none() {
            return Err(HarnessError::Scenario(format!("expectation names unknown link {l}")));
        }
    }
    Ok(())
}

/// Runs `scenario` on `topology` to quiescence and checks its expectations.
pub fn run(topology: Arc<Topology>, scenario: &Scenario, opts: &RunOptions) -> Result<RunOutput, HarnessError> {
    check_references(&topology, scenario)?;
    let golden = match &scenario.expect.trace {
        Some(rel) => {
            let path = opts.resolve(rel);
            let text = read_file(&path)?;
            Some(decode_trace(&text).map_err(|source| HarnessError::Trace { path, source })?)
        }
        None => None,
    };

    let defaults = NetworkConfig::default();
    let config = NetworkConfig {
        seed: opts.seed,
        timeout_ms: scenario.config.timeout_ms.unwrap_or(defaults.timeout_ms),
        cache_ttl_ms: opts.cache_ttl_ms.or(scenario.config.cache_ttl_ms).unwrap_or(defaults.cache_ttl_ms),
        session_lifetime_ms: scenario.config.session_lifetime_ms,
        delivered_ttl_ms: scenario.config.delivered_ttl_ms,
        weight_policy: opts.weight_policy,
    };
    let mut net = Network::new(topology, config);
    let mut not_run = Vec::new();
    let mut in_budget = true;

    for event in &scenario.events {
        in_budget &= net.run_until(event.at(), opts.step_budget);
        match event {
            Event::GetKey { app, target, label, .. } => {
                net.request_key(app, target, label.clone());
            }
            Event::GetKeyWithId { app, target, key_of, key_id, label, .. } => {
                let id = match (key_id, key_of) {
                    (Some(id), _) => Some(id.clone()),
                    (None, Some(of)) => net
                        .outcomes()
                        .into_iter()
                        .find(|o| o.label.as_deref() == Some(of.as_str()))
                        .and_then(|o| o.key_id),
                    (None, None) => None,
                };
                match id {
                    Some(id) => {
                        net.request_key_with_id(app, target, id, label.clone());
                    }
                    // The initiator never got a key id to share.
                    None => not_run.extend(label.clone()),
                }
            }
            Event::TickLinks { dt_ms, link, .. } => {
                net.tick_links(*dt_ms, link.as_ref());
            }
            Event::DropMessage { nth, msg_type, .. } => {
                net.arm_fault(FaultRule { action: FaultAction::Drop, nth: *nth, msg_type: msg_type.clone() });
            }
            Event::CorruptMessage { nth, msg_type, .. } => {
                net.arm_fault(FaultRule { action: FaultAction::Corrupt, nth: *nth, msg_type: msg_type.clone() });
            }
            Event::AdvanceClock { ms, .. } => {
                let t = net.now() + ms;
                in_budget &= net.run_until(t, opts.step_budget);
                net.session_gc();
            }
        }
    }
    in_budget &= net.run_to_quiescence(opts.step_budget);

    let trace = net.trace().to_vec();
    let outcomes = net.outcomes();
    let mut report = Report {
        seed: opts.seed,
        quiescent: in_budget && net.is_quiescent(),
        final_time_ms: net.now(),
        messages_delivered: net.delivered(),
        requests: outcomes.iter().map(RequestReport::from).collect(),
        not_run,
        message_counts: message_counts(&trace),
        link_usage: net
            .topology()
            .links()
            .iter()
            .filter_map(|l| Some((l.id.clone(), net.link_usage(&l.id)?)))
            .collect(),
        total_keys_used: net.total_keys_used(),
        controller: net.qusec().dump(),
        faults: net.faults().to_vec(),
        notes: net.notes().to_vec(),
        failures: Vec::new(),
        trace_diff: None,
    };
    check(&mut report, &scenario.expect, &outcomes, &trace, golden.as_deref());
    Ok(RunOutput { trace, report, network: net })
}

fn check(report: &mut Report, expect: &Expectations, outcomes: &[Outcome], trace: &[Envelope], golden: Option<&[Envelope]>) {
    let mut fail = Vec::new();
    if !report.quiescent {
        fail.push("run did not reach quiescence".to_owned());
    }
    let by_label = |l: &str| outcomes.iter().find(|o| o.label.as_deref() == Some(l));
    for (label, want) in &expect.statuses {
        let got = match by_label(label) {
            Some(o) => o.status.as_str().to_owned(),
            None if report.not_run.contains(label) => "not_run".to_owned(),
            None => "missing".to_owned(),
        };
        if &got != want {
            fail.push(format!("status of {label}: expected {want}, got {got}"));
        }
    }
    let material = |l: &str| by_label(l).filter(|o| o.status.is_ok()).and_then(|o| o.material.as_ref());
    for [x, y] in &expect.keys_equal {
        match (material(x), material(y)) {
            (Some(a), Some(b)) if a == b => {}
            (Some(_), Some(_)) => fail.push(format!("keys {x} and {y} differ")),
            _ => fail.push(format!("keys {x} and {y}: not both delivered")),
        }
    }
    for [x, y] in &expect.keys_differ {
        match (material(x), material(y)) {
            (Some(a), Some(b)) if a != b => {}
            (Some(_), Some(_)) => fail.push(format!("keys {x} and {y} are equal")),
            _ => fail.push(format!("keys {x} and {y}: not both delivered")),
        }
    }
    for (link, want) in &expect.pool_consumed {
        let got = report.link_usage.get(link).map_or(0, |u| u.keys_used);
        if got != *want {
            fail.push(format!("keys used on link {link}: expected {want}, got {got}"));
        }
    }
    if let Some(want) = expect.total_keys_used {
        if report.total_keys_used != want {
            fail.push(format!("total keys used: expected {want}, got {}", report.total_keys_used));
        }
    }
    for (ty, want) in &expect.message_counts {
        let got = report.message_counts.get(ty).copied().unwrap_or(0);
        if got != *want {
            fail.push(format!("{ty} messages: expected {want}, got {got}"));
        }
    }
    if let Some(golden) = golden {
        let d = diff_records(golden, trace);
        if !d.is_empty() {
            fail.push(format!("trace mismatch at record {}", d.index.unwrap_or_default()));
            report.trace_diff = Some(d);
        }
    }
    report.failures = fail;
}

/// Loads both files and runs. Scenario-relative paths resolve against the
/// scenario's directory.
pub fn run_files(topology: &Path, scenario: &Path, opts: &RunOptions) -> Result<RunOutput, HarnessError> {
    let topo = load_topology(&read_file(topology)?)?;
    let sc = Scenario::parse(&read_file(scenario)?).map_err(HarnessError::Scenario)?;
    let mut opts = opts.clone();
    if opts.base_dir.is_none() {
        opts.base_dir = scenario.parent().map(Path::to_owned);
    }
    run(Arc::new(topo), &sc, &opts)
}

/// Loads a scenario whose topology is named inside the scenario file.
pub fn run_scenario_file(scenario: &Path, opts: &RunOptions) -> Result<RunOutput, HarnessError> {
    let sc = Scenario::parse(&read_file(scenario)?).map_err(HarnessError::Scenario)?;
    let dir = scenario.parent().map(Path::to_owned).unwrap_or_default();
    let Some(rel) = &sc.topology else {
        return Err(HarnessError::Scenario("scenario names no topology".into()));
    };
    let topo = load_topology(&read_file(&dir.join(rel))?)?;
    let mut opts = opts.clone();
    opts.base_dir.get_or_insert(dir);
    run(Arc::new(topo), &sc, &opts)
}
